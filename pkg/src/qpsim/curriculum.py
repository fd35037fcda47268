"""Stage schedule for progressively stiffer physics.

A curriculum is an ordered list of stages. Early stages relax the point-set
coupling and use a long-range, soft contact model so tracking gradients stay
informative; later stages shrink the detection range and stiffen the springs
until the final analytical model, with the learned residual enabled only in
the last stage. Parameters must tighten monotonically.
"""

from __future__ import annotations

import dataclasses

from . import contact as contactmod
from . import scene as scenemod
from . import simulator


@dataclasses.dataclass(frozen=True)
class StageConfig:
    alpha: float  # point-set relaxation weight; 0 = rigid attachment
    d_c: float  # contact detection range, m
    k_n: float  # contact spring, N/m
    k_f: float  # friction spring, N/m
    k_d: float  # contact damping, N s/m^2
    residual_enabled: bool = False


def default_curriculum() -> tuple[StageConfig, ...]:
    """The ten-stage default schedule."""
    alpha = (0.1, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    d_c = (0.1, 0.1, 0.05, 0.03, 0.025, 0.02, 0.015, 0.01, 0.0, 0.0)
    k_n = (4e4, 4e4, 8e4, 1e5, 2e5, 3e5, 3.5e5, 4e5, 4e6, 4e6)
    k_f = (1e5, 1e5, 2e5, 4e5, 5e5, 6e5, 8e5, 1e6, 1e7, 1e7)
    return _build(alpha, d_c, k_n, k_f)


def curriculum_ii() -> tuple[StageConfig, ...]:
    """The seven-stage reduced schedule (several middle stages removed)."""
    alpha = (0.1, 0, 0, 0, 0, 0, 0)
    d_c = (0.1, 0.1, 0.05, 0.02, 0.01, 0.0, 0.0)
    k_n = (4e4, 4e4, 8e4, 3e5, 4e5, 4e6, 4e6)
    k_f = (1e5, 1e5, 2e5, 6e5, 1e6, 1e7, 1e7)
    return _build(alpha, d_c, k_n, k_f)


def _build(alpha, d_c, k_n, k_f) -> tuple[StageConfig, ...]:
    n = len(alpha)
    stages = tuple(
        StageConfig(float(alpha[i]), float(d_c[i]), float(k_n[i]), float(k_f[i]),
                    1e3, residual_enabled=(i == n - 1))
        for i in range(n)
    )
    validate_stages(stages)
    return stages


def validate_stages(stages) -> None:
    """Enforce the schedule invariants; raises ValueError on violation."""
    if len(stages) == 0:
        raise ValueError("curriculum has no stages")
    for s in stages:
        if not (0.0 <= s.alpha <= 1.0):
            raise ValueError(f"alpha {s.alpha} outside [0, 1]")
        if min(s.d_c, s.k_n, s.k_f, s.k_d) < 0.0:
            raise ValueError("negative stage parameter")
    for a, b in zip(stages, stages[1:]):
        if b.alpha > a.alpha:
            raise ValueError("alpha must be non-increasing across stages")
        if b.d_c > a.d_c:
            raise ValueError("contact range must be non-increasing across stages")
        if b.k_n < a.k_n or b.k_f < a.k_f:
            raise ValueError("spring stiffnesses must be non-decreasing across stages")
    for i, s in enumerate(stages):
        if s.residual_enabled and i != len(stages) - 1:
            raise ValueError("residual physics is allowed only in the final stage")


def sim_config(stage: StageConfig, **overrides) -> simulator.SimConfig:
    """Simulator configuration for one stage; overrides pass through to
    make_config (dt, substeps, gravity, root_gain, ...)."""
    cp = contactmod.make_contact_params(stage.d_c, stage.k_n, stage.k_d, stage.k_f)
    return simulator.make_config(cp, alpha=stage.alpha, **overrides)


def advance(
    stages,
    index: int,
    controls: scenemod.ControlTrajectory,
    params: scenemod.SystemParams,
    **overrides,
):
    """Enter stage `index`, carrying the optimized controls and identified
    system parameters verbatim. Per-point actuations exist only while the
    point set is relaxed, so they are dropped once alpha reaches zero. A
    transition that changes nothing returns the carried state unchanged.

    Returns (SimConfig, ControlTrajectory, SystemParams).
    """
    stage = stages[index]
    if stage.alpha == 0.0 and controls.point_forces is not None:
        controls = scenemod.ControlTrajectory(
            controls.joint_forces, controls.root_velocities, None
        )
    return sim_config(stage, **overrides), controls, params


# ----------------------------------------------------------------- file format

_COLUMNS = "alpha d_c k_n k_f k_d residual"


def save_curriculum(path: str, stages) -> None:
    validate_stages(stages)
    with open(path, "w") as fh:
        fh.write(f"# {_COLUMNS}\n")
        for s in stages:
            flag = 1 if s.residual_enabled else 0
            fh.write(f"{s.alpha!r} {s.d_c!r} {s.k_n!r} {s.k_f!r} {s.k_d!r} {flag}\n")


def load_curriculum(path: str) -> tuple[StageConfig, ...]:
    stages = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns ({_COLUMNS})")
            try:
                vals = [float(p) for p in parts[:5]]
                flag = int(parts[5])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            if flag not in (0, 1):
                raise ValueError(f"{path}:{lineno}: residual flag must be 0 or 1")
            stages.append(StageConfig(*vals, residual_enabled=bool(flag)))
    stages = tuple(stages)
    validate_stages(stages)
    return stages
