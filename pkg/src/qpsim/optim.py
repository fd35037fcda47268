"""Tracking objectives and the staged transfer optimization.

The pipeline: retarget the demonstration kinematically, initialize controls
from the retargeted motion, then walk the stage schedule, alternating
gradient refinement of the control trajectory with identification of the
object's physical parameters. Both optimizers are monotone-accept: they
return the best iterate seen, never something worse than their input.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from . import adam, curriculum, kinematics
from . import scene as scenemod
from . import simulator

LAMBDA_SMOOTH = 0.1  # retargeting temporal smoothness weight
POINT_FORCE_REG = 1e-3  # keeps relaxed-point actuation from doing the task alone


@dataclasses.dataclass(frozen=True)
class TrackingObjective:
    """Demonstration targets aligned to the model's keypoint order."""

    keypoints: jnp.ndarray  # (N, K, 3)
    object_quat: jnp.ndarray  # (N, 4) unit
    object_pos: jnp.ndarray  # (N, 3)
    w_object: float = 1.0
    w_hand: float = 1.0


def make_tracking_objective(
    demo: scenemod.Demonstration,
    model: scenemod.ArticulatedModel,
    w_object: float = 1.0,
    w_hand: float = 1.0,
) -> TrackingObjective:
    order = [demo.labels.index(lbl) for lbl in model.keypoint_labels]
    return TrackingObjective(
        keypoints=jnp.asarray(demo.keypoints[:, order]),
        object_quat=jnp.asarray(demo.object_quat),
        object_pos=jnp.asarray(demo.object_pos),
        w_object=float(w_object),
        w_hand=float(w_hand),
    )


def objective_parts(keypoints, obj_quat, obj_pos, target: TrackingObjective):
    """(f_object, f_hand) for aligned trajectories.

    Object part: per frame, (1 - |q.q_ref|) + |t - t_ref|; the absolute dot
    treats q and -q as the same rotation. Hand part: mean keypoint distance.
    """
    qdot = jnp.abs(jnp.sum(obj_quat * target.object_quat, axis=-1))
    terr = _safe_norm(obj_pos - target.object_pos)
    f_obj = jnp.mean((1.0 - qdot) + terr)
    if target.keypoints.size == 0:  # keypoint-free rigs track the object only
        f_hand = jnp.zeros(())
    else:
        f_hand = jnp.mean(_safe_norm(keypoints - target.keypoints))
    return f_obj, f_hand


def objective(keypoints, obj_quat, obj_pos, target: TrackingObjective):
    if len(obj_pos) != len(target.object_pos):
        raise ValueError(
            f"trajectory has {len(obj_pos)} frames, demonstration "
            f"{len(target.object_pos)}"
        )
    f_obj, f_hand = objective_parts(keypoints, obj_quat, obj_pos, target)
    return target.w_object * f_obj + target.w_hand * f_hand


def trace_objective(trace: simulator.FrameTrace, target: TrackingObjective):
    """Objective of a rollout trace against the full demonstration. The trace
    must cover exactly the demonstration frames (controls = N-1 frames)."""
    return objective(trace.keypoints, trace.obj_quat, trace.obj_pos, target)


def _safe_norm(x, axis=-1):
    # norm with a well-defined (zero) gradient at exactly-zero inputs
    sq = jnp.sum(x * x, axis=axis)
    positive = sq > 0.0
    return jnp.where(positive, jnp.sqrt(jnp.where(positive, sq, 1.0)), 0.0)


# ------------------------------------------------------------- retargeting


def retarget_kinematic(
    model: scenemod.ArticulatedModel,
    demo: scenemod.Demonstration,
    steps: int = 40,
    lambda_s: float = LAMBDA_SMOOTH,
):
    """Per-frame inverse kinematics with temporal smoothing.

    Each frame minimizes the squared keypoint mismatch plus lambda_s times
    the squared step from the previous frame's solution, warm started at
    that solution. The descent uses damped least-squares iterations: plain
    first-order steps stall or hop branches where finger chains straighten
    and the keypoint Jacobian turns near singular.

    Returns (q trajectory (N, n), keypoint residual distances (N, K)).
    Unreachable targets converge to the workspace boundary; the residuals
    report how far each keypoint remained from its target.
    """
    cm = kinematics.compile_model(model)
    order = [demo.labels.index(lbl) for lbl in model.keypoint_labels]
    targets = jnp.asarray(demo.keypoints[:, order])
    eye = jnp.eye(cm.n_dof)

    def residual_vec(q, tgt, q_prev, sw):
        kp = kinematics.keypoint_positions(cm, q)
        # millimeter scale keeps the fit dominant over the smoothness term
        return jnp.concatenate([
            (1000.0 * (kp - tgt)).ravel(),
            sw * (q - q_prev),
        ])

    def frame_cost(q, tgt, q_prev, sw):
        return jnp.sum(residual_vec(q, tgt, q_prev, sw) ** 2)

    @jax.jit
    def solve_frame(q0, tgt, q_prev, sw):
        def body(carry, _):
            q, mu = carry
            r = residual_vec(q, tgt, q_prev, sw)
            J = jax.jacfwd(residual_vec)(q, tgt, q_prev, sw)
            H = J.T @ J + mu * eye
            q_try = q + jnp.linalg.solve(H, -(J.T @ r))
            better = frame_cost(q_try, tgt, q_prev, sw) < jnp.sum(r**2)
            q = jnp.where(better, q_try, q)
            mu = jnp.where(better, jnp.maximum(mu * 0.3, 1e-8), mu * 10.0)
            return (q, mu), None

        (q, _), _ = jax.lax.scan(body, (q0, 1e-2), None, length=steps)
        kp = kinematics.keypoint_positions(cm, q)
        return q, _safe_norm(kp - tgt)

    qs, residuals = [], []
    q_prev = jnp.zeros(cm.n_dof)
    sqrt_ls = jnp.sqrt(jnp.asarray(lambda_s))
    for n in range(demo.num_frames):
        # the first frame has no predecessor to stay close to
        sw = jnp.asarray(0.0) if n == 0 else sqrt_ls
        q_n, res = solve_frame(q_prev, targets[n], q_prev, sw)
        qs.append(q_n)
        residuals.append(res)
        q_prev = q_n
    return jnp.stack(qs), jnp.stack(residuals)


def build_correspondences(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Nearest-neighbor index map source -> target (ties to the lowest index)."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.size == 0 or tgt.size == 0:
        raise ValueError("correspondence needs non-empty point sets")
    d2 = np.sum((src[:, None, :] - tgt[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


# ---------------------------------------------------- control optimization


def _finite(x) -> bool:
    return bool(np.isfinite(x))


def optimize_controls(loss_fn, controls: scenemod.ControlTrajectory,
                      steps: int = 100, lr: float = 5e-4, *,
                      value_and_grad=None):
    """First-order refinement of a control trajectory under loss_fn.

    Monotone accept: returns the best iterate, or `controls` itself if no
    step improved on it. A non-finite loss stops the run and reverts to the
    last finite best. Returns (controls, losses per evaluated step).

    A prebuilt value_and_grad(controls) bypasses the internal jit so callers
    looping over many configurations can share one compiled graph.
    """
    if steps == 0:
        return controls, np.zeros(0)
    if value_and_grad is None:
        value_and_grad = jax.jit(jax.value_and_grad(loss_fn))
    step_fn = value_and_grad
    opt = adam.init(controls)
    best, best_loss = controls, np.inf
    current = controls
    losses = []
    for _ in range(steps):
        loss, grads = step_fn(current)
        loss = float(loss)
        if not _finite(loss):
            break
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = current, loss
        opt, current = adam.update(opt, grads, current, lr)
    return best, np.asarray(losses)


# -------------------------------------------------- parameter identification


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class _ParamVector:
    """Unconstrained parameterization of SystemParams: log mass, log-Cholesky
    inertia (SPD by construction), raw damping values (projected >= 0)."""

    log_mass: jnp.ndarray
    chol: jnp.ndarray  # (6,): log L00, L10, log L11, L20, L21, log L22
    lin_damp: jnp.ndarray
    ang_damp: jnp.ndarray


def _encode(params: scenemod.SystemParams) -> _ParamVector:
    L = jnp.linalg.cholesky(jnp.asarray(params.object_inertia))
    chol = jnp.array([
        jnp.log(L[0, 0]), L[1, 0], jnp.log(L[1, 1]),
        L[2, 0], L[2, 1], jnp.log(L[2, 2]),
    ])
    return _ParamVector(
        log_mass=jnp.log(jnp.asarray(params.object_mass)),
        chol=chol,
        lin_damp=jnp.asarray(params.linear_velocity_damping),
        ang_damp=jnp.asarray(params.angular_velocity_damping),
    )


def _decode(vec: _ParamVector) -> scenemod.SystemParams:
    L = jnp.zeros((3, 3))
    L = L.at[0, 0].set(jnp.exp(vec.chol[0]))
    L = L.at[1, 0].set(vec.chol[1])
    L = L.at[1, 1].set(jnp.exp(vec.chol[2]))
    L = L.at[2, 0].set(vec.chol[3])
    L = L.at[2, 1].set(vec.chol[4])
    L = L.at[2, 2].set(jnp.exp(vec.chol[5]))
    return scenemod.SystemParams(
        object_mass=jnp.exp(vec.log_mass),
        object_inertia=L @ L.T,
        linear_velocity_damping=vec.lin_damp,
        angular_velocity_damping=vec.ang_damp,
    )


def _project(vec: _ParamVector, mass_bounds) -> _ParamVector:
    lo, hi = mass_bounds
    return _ParamVector(
        log_mass=jnp.clip(vec.log_mass, jnp.log(lo), jnp.log(hi)),
        chol=vec.chol,
        lin_damp=jnp.maximum(vec.lin_damp, 0.0),
        ang_damp=jnp.maximum(vec.ang_damp, 0.0),
    )


def identify_parameters(loss_fn, params: scenemod.SystemParams,
                        steps: int = 1000, lr: float = 5e-4,
                        mass_bounds=(1e-3, 100.0), *,
                        _vec_value_and_grad=None):
    """Projected first-order identification of object parameters.

    loss_fn takes a SystemParams. Mass stays inside mass_bounds, the inertia
    stays symmetric positive definite by construction, dampings stay
    nonnegative. Monotone accept and non-finite revert as optimize_controls.
    Returns (SystemParams, losses).
    """
    if steps == 0:
        return params, np.zeros(0)
    vec = _project(_encode(params), mass_bounds)
    if _vec_value_and_grad is None:
        step_fn = jax.jit(jax.value_and_grad(lambda v: loss_fn(_decode(v))))
    else:
        step_fn = _vec_value_and_grad
    opt = adam.init(vec)
    best, best_loss = vec, np.inf
    losses = []
    for _ in range(steps):
        loss, grads = step_fn(vec)
        loss = float(loss)
        if not _finite(loss):
            break
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = vec, loss
        opt, vec = adam.update(opt, grads, vec, lr)
        vec = _project(vec, mass_bounds)
    return _decode(best), np.asarray(losses)


# ------------------------------------------------------------ staged transfer


def controls_from_kinematics(cm, q_traj: jnp.ndarray, frame_rate: float,
                             num_points: int | None = None):
    """Initial controls for a retargeted joint trajectory: root velocity
    targets from finite differences, joint feedforward matching the viscous
    damping at the reference speed, optional zeroed per-point actuation."""
    qd = (q_traj[1:] - q_traj[:-1]) * frame_rate
    root_vel = qd[:, :6]
    jf = jnp.concatenate([jnp.zeros_like(qd[:, :6]), qd[:, 6:] * cm.dof_damping[6:]],
                         axis=1)
    pf = None if num_points is None else jnp.zeros((len(jf), num_points, 3))
    return scenemod.ControlTrajectory(jf, root_vel, pf)


@dataclasses.dataclass
class StageLogRow:
    stage: int
    iteration: int
    f_object: float
    f_hand: float
    total: float


def write_log_csv(path: str, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "f_object", "f_hand", "total"])
        for r in rows:
            w.writerow([r.stage, r.iteration, f"{r.f_object:.9g}",
                        f"{r.f_hand:.9g}", f"{r.total:.9g}"])


def initial_state(cm, points, cfg, demo: scenemod.Demonstration, q0=None):
    state = simulator.make_state(
        cm, points, cfg,
        q=q0,
        obj_quat=jnp.asarray(demo.object_quat[0]),
        obj_pos=jnp.asarray(demo.object_pos[0]),
    )
    return state


def run_transfer(
    model: scenemod.ArticulatedModel,
    obj: scenemod.ObjectSpec,
    demo: scenemod.Demonstration,
    params: scenemod.SystemParams,
    stages=None,
    *,
    iterations: int = 5,
    control_steps: int = 100,
    param_steps: int = 1000,
    control_lr: float = 5e-4,
    param_lr: float = 5e-4,
    early_tol: float = 1e-4,
    retarget_steps: int = 40,
    sim_overrides: dict | None = None,
    identify: bool = True,
):
    """Optimize controls through every non-residual stage of the schedule.

    Returns (controls, params, q_retarget, log rows). The final residual
    stage is out of scope here; its fitting loop lives with the target-
    simulator tooling.
    """
    stages = curriculum.default_curriculum() if stages is None else stages
    analytical = [s for s in stages if not s.residual_enabled]
    overrides = dict(sim_overrides or {})
    overrides.setdefault("gravity", obj.gravity)
    frame_dt = float(overrides.get("dt", 5e-4)) * int(overrides.get("substeps", 20))
    if abs(frame_dt - 1.0 / demo.frame_rate) > 1e-9:
        raise ValueError(
            f"stage configs advance {frame_dt:.6g} s per frame but the "
            f"demonstration is sampled at {demo.frame_rate:g} Hz"
        )
    mass_bounds = (1e-3, 100.0)

    cm = kinematics.compile_model(model)
    grid = obj.build_grid()
    target = make_tracking_objective(demo, model)

    q_ref, _ = retarget_kinematic(model, demo, steps=retarget_steps)

    from . import fixtures  # bundled point-set builder doubles as the default

    def make_group(alpha: float):
        # One compiled graph per point-set variant: a single value-and-grad
        # over (controls, params) with the tracking terms as aux. The stage
        # schedule enters through cfg and state0 as traced arguments, so
        # every rigid stage reuses the same executable.
        points = fixtures.make_point_set(model, alpha)

        def full_loss(ctrl, vec, cfg, state0):
            sysp = _decode(vec)
            trace, _ = simulator.rollout(cm, grid, points, cfg, sysp, state0, ctrl)
            f_obj, f_hand = objective_parts(
                trace.keypoints, trace.obj_quat, trace.obj_pos, target
            )
            f = target.w_object * f_obj + target.w_hand * f_hand
            if ctrl.point_forces is not None:
                f = f + POINT_FORCE_REG * jnp.sum(ctrl.point_forces ** 2)
            return f, (f_obj, f_hand)

        vg = jax.jit(jax.value_and_grad(full_loss, argnums=(0, 1), has_aux=True))
        return {"points": points, "vg": vg}

    logs: list[StageLogRow] = []
    controls = None
    groups: dict[float, dict] = {}

    for index, stage in enumerate(analytical):
        if stage.alpha not in groups:
            groups[stage.alpha] = make_group(stage.alpha)
        g = groups[stage.alpha]
        points = g["points"]

        if controls is None:
            controls = controls_from_kinematics(
                cm, q_ref, demo.frame_rate,
                num_points=points.count if stage.alpha > 0 else None,
            )
        cfg, controls, params = curriculum.advance(
            analytical, index, controls, params, **overrides
        )
        state0 = initial_state(cm, points, cfg, demo, q0=q_ref[0])

        def ctrl_step(c, vec):
            (loss, _), (gc, _) = g["vg"](c, vec, cfg, state0)
            return loss, gc

        def vec_step(v, ctrl):
            (loss, _), (_, gv) = g["vg"](ctrl, v, cfg, state0)
            return loss, gv

        prev_total = None
        for it in range(iterations):
            vec_now = _project(_encode(params), mass_bounds)
            controls, _ = optimize_controls(
                None, controls, steps=control_steps, lr=control_lr,
                value_and_grad=lambda c: ctrl_step(c, vec_now),
            )
            if identify and param_steps > 0:
                ctrl_now = controls
                params, _ = identify_parameters(
                    None, params, steps=param_steps, lr=param_lr,
                    mass_bounds=mass_bounds,
                    _vec_value_and_grad=lambda v: vec_step(v, ctrl_now),
                )
            (_, (f_obj, f_hand)), _ = g["vg"](
                controls, _project(_encode(params), mass_bounds), cfg, state0
            )
            f_obj, f_hand = float(f_obj), float(f_hand)
            total = target.w_object * f_obj + target.w_hand * f_hand
            logs.append(StageLogRow(index + 1, it + 1, f_obj, f_hand, total))
            if prev_total is not None and prev_total - total < early_tol:
                break
            prev_total = total

    return controls, params, q_ref, logs
