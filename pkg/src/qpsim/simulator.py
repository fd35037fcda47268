"""Differentiable semi-implicit simulation of hand, object, and contact.

One frame = `substeps` equal substeps at step size dt. Controls are held
constant over a frame. The blend weight alpha splits contact reactions
between the articulated equation (weight 1-alpha) and free per-point
displacement states delta (weight alpha); delta decays back toward the rigid
attachment so the relaxation stays bounded.

Discrete contact decisions (activation, stick/slip, breaks) are constants of
each substep; everything continuous is differentiable end to end, including
through SystemParams.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from . import contact as contactmod
from . import kinematics, quat
from . import mesh as meshmod
from . import scene as scenemod
from . import sdf as sdfmod


@dataclasses.dataclass(frozen=True)
class PointSet:
    """Ambient sample points rigidly tied to hand links.

    Held as a closure constant by jitted code, like CompiledModel.
    """

    body: np.ndarray  # (P,) link ids
    local: jnp.ndarray  # (P,3) link frame
    mass: jnp.ndarray  # (P,) kg, summing to the link mass per link
    alpha: float  # relaxation weight in [0, 0.1]

    @property
    def count(self) -> int:
        return len(self.body)


def build_point_set(
    model: scenemod.ArticulatedModel,
    alpha: float,
    samples_per_link: int = 16,
    r_shell: float = 0.0,
    seed: int = 0,
    links=None,
) -> PointSet:
    """Sample `samples_per_link` points per link in a shell above its surface.

    `links` restricts sampling to a subset of link indices (default: all).
    """
    if samples_per_link < 4:
        raise ValueError("samples_per_link must be >= 4")
    if r_shell < 0.0:
        raise ValueError("r_shell must be >= 0")
    rng = np.random.default_rng(seed)
    chosen = range(len(model.links)) if links is None else [int(l) for l in links]
    bodies, locals_, masses = [], [], []
    for li in chosen:
        link = model.links[li]
        m = link.shape.to_mesh()
        if meshmod.surface_area(m) <= 0.0:
            raise ValueError(f"link {link.name!r} has a degenerate surface")
        pts, normals = meshmod.sample_surface(m, samples_per_link, rng)
        lift = rng.uniform(0.0, r_shell, size=(samples_per_link, 1)) if r_shell > 0 else 0.0
        pts = pts + normals * lift + link.com  # shape frame -> link frame
        bodies.append(np.full(samples_per_link, li))
        locals_.append(pts)
        masses.append(np.full(samples_per_link, link.mass / samples_per_link))
    return PointSet(
        body=np.concatenate(bodies),
        local=jnp.asarray(np.concatenate(locals_)),
        mass=jnp.asarray(np.concatenate(masses)),
        alpha=float(alpha),
    )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class SimConfig:
    """Stage-dependent physics configuration.

    Contact/stage scalars are traced (stages share one compiled step);
    substeps and the point-state switch change the program structure and are
    static.
    """

    contact: contactmod.ContactParams
    alpha: jnp.ndarray
    gravity: jnp.ndarray  # (3,) applied to the object
    dt: jnp.ndarray  # s
    root_gain: jnp.ndarray  # 1/s, root velocity servo
    limit_stiffness: jnp.ndarray  # N m/rad, soft joint-limit spring
    delta_decay: jnp.ndarray  # 1/s, pull of point displacements back to rigid
    substeps: int = dataclasses.field(metadata=dict(static=True))
    with_points: bool = dataclasses.field(metadata=dict(static=True))


def make_config(
    contact_params: contactmod.ContactParams,
    alpha: float = 0.0,
    gravity=(0.0, 0.0, -9.81),
    dt: float = 5e-4,
    substeps: int = 20,
    root_gain: float = 100.0,
    limit_stiffness: float = 10.0,
    delta_decay: float = 10.0,
    with_points: bool | None = None,
) -> SimConfig:
    if with_points is None:
        with_points = float(alpha) > 0.0
    as64 = lambda v: jnp.asarray(v, dtype=jnp.float64)
    return SimConfig(
        contact=contact_params,
        alpha=as64(alpha),
        gravity=as64(gravity),
        dt=as64(dt),
        root_gain=as64(root_gain),
        limit_stiffness=as64(limit_stiffness),
        delta_decay=as64(delta_decay),
        substeps=int(substeps),
        with_points=bool(with_points),
    )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class SimState:
    q: jnp.ndarray  # (n,)
    qd: jnp.ndarray  # (n,)
    obj_quat: jnp.ndarray  # (4,) wxyz unit
    obj_pos: jnp.ndarray  # (3,) COM
    obj_linvel: jnp.ndarray  # (3,)
    obj_angvel: jnp.ndarray  # (3,) world frame
    delta: jnp.ndarray  # (P,3) or (0,3): free point displacements
    delta_vel: jnp.ndarray  # like delta
    pairs: contactmod.PairState


def make_state(
    cm: kinematics.CompiledModel,
    points: PointSet,
    cfg: SimConfig,
    q=None,
    obj_quat=None,
    obj_pos=None,
) -> SimState:
    p = points.count if cfg.with_points else 0
    return SimState(
        q=jnp.zeros(cm.n_dof) if q is None else jnp.asarray(q, dtype=jnp.float64),
        qd=jnp.zeros(cm.n_dof),
        obj_quat=(
            jnp.array([1.0, 0.0, 0.0, 0.0]) if obj_quat is None
            else jnp.asarray(obj_quat, dtype=jnp.float64)
        ),
        obj_pos=jnp.zeros(3) if obj_pos is None else jnp.asarray(obj_pos, dtype=jnp.float64),
        obj_linvel=jnp.zeros(3),
        obj_angvel=jnp.zeros(3),
        delta=jnp.zeros((p, 3)),
        delta_vel=jnp.zeros((p, 3)),
        pairs=contactmod.empty_pairs(points.count),
    )


def _hand_points(cm, points: PointSet, state: SimState, cfg: SimConfig):
    """World positions, velocities, and Jacobians of the hand point set."""
    x = kinematics.transform_points(cm, state.q, points.body, points.local)
    J = kinematics.point_set_jacobian(cm, state.q, points.body, points.local)
    v = jnp.einsum("pij,j->pi", J, state.qd)
    if cfg.with_points:
        x = x + state.delta
        v = v + state.delta_vel
    return x, v, J


def _passive_forces(cm, cfg: SimConfig, q, qd):
    limit = cfg.limit_stiffness * (
        jnp.maximum(q - cm.dof_upper, 0.0) - jnp.maximum(cm.dof_lower - q, 0.0)
    )
    return -cm.dof_damping * qd - cm.dof_stiffness * q - limit


def substep(
    cm: kinematics.CompiledModel,
    grid: sdfmod.SdfGrid,
    points: PointSet,
    cfg: SimConfig,
    sys: scenemod.SystemParams,
    state: SimState,
    u: jnp.ndarray,  # (n,) joint forces
    root_target: jnp.ndarray,  # (6,) commanded root velocity
    a_points: jnp.ndarray | None = None,  # (P,3) point actuation
    extra=None,  # optional (gen (n,), obj force (3,), obj torque (3,))
) -> SimState:
    x, v, J = _hand_points(cm, points, state, cfg)

    pairs = contactmod.detect_contacts(
        state.pairs, grid, x, state.obj_quat, state.obj_pos, cfg.contact.d_c
    )
    f_n, f_f, pairs_after = contactmod.pair_forces(
        pairs, grid, x, v, state.obj_quat, state.obj_pos,
        state.obj_linvel, state.obj_angvel, cfg.contact,
    )
    anchors_w = contactmod.anchor_world_positions(pairs, state.obj_quat, state.obj_pos)
    gen_c, f_obj, tau_obj, f_points = contactmod.accumulate_wrenches(
        f_n, f_f, anchors_w, state.obj_pos, J, cfg.alpha
    )

    M = kinematics.mass_matrix(cm, state.q)
    bias = kinematics.bias_force(cm, state.q, state.qd)
    servo_gain = cm.root_dofs * cfg.root_gain * jnp.diag(M)
    servo = servo_gain * (
        jnp.concatenate([root_target, jnp.zeros(cm.n_dof - 6)]) - state.qd
    )
    rhs = bias + _passive_forces(cm, cfg, state.q, state.qd) + u + servo + gen_c
    if extra is not None:
        rhs = rhs + extra[0]
    # joint damping and the servo act on the end-of-step velocity, which keeps
    # them stable at any strength; both fold into the solve as a diagonal term
    A = M + cfg.dt * jnp.diag(cm.dof_damping + servo_gain)
    cho = jax.scipy.linalg.cho_factor(A)
    qdd = jax.scipy.linalg.cho_solve(cho, rhs)
    qd_new = state.qd + cfg.dt * qdd
    q_new = state.q + cfg.dt * qd_new

    # Object: damped free body under gravity and contact. The rotational
    # update advances world-frame angular momentum (torque-free motion then
    # conserves it exactly and high spin rates stay bounded); the stored
    # angular velocity is re-solved against the inertia at the new
    # orientation so momentum carries over between substeps bit-for-bit.
    m_o = sys.object_mass
    R_o = quat.to_matrix(state.obj_quat)
    I_w = R_o @ sys.object_inertia @ R_o.T
    L = I_w @ state.obj_angvel
    force = f_obj + m_o * cfg.gravity - sys.linear_velocity_damping * m_o * state.obj_linvel
    torque = tau_obj - sys.angular_velocity_damping * L
    if extra is not None:
        force = force + extra[1]
        torque = torque + extra[2]
    linvel = state.obj_linvel + cfg.dt * force / m_o
    L_new = L + cfg.dt * torque
    pos = state.obj_pos + cfg.dt * linvel
    qo = quat.integrate(state.obj_quat, jnp.linalg.solve(I_w, L_new), cfg.dt)
    R_new = quat.to_matrix(qo)
    angvel = jnp.linalg.solve(R_new @ sys.object_inertia @ R_new.T, L_new)

    if cfg.with_points:
        f_free = f_points
        if a_points is not None:
            f_free = f_free + cfg.alpha * a_points
        decay = jnp.exp(-cfg.delta_decay * cfg.dt)
        dvel = (state.delta_vel + cfg.dt * f_free / points.mass[:, None]) * decay
        delta = state.delta + cfg.dt * dvel
    else:
        dvel = state.delta_vel
        delta = state.delta

    return SimState(
        q=q_new, qd=qd_new, obj_quat=qo, obj_pos=pos, obj_linvel=linvel,
        obj_angvel=angvel, delta=delta, delta_vel=dvel, pairs=pairs_after,
    )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class FrameTrace:
    """Per-frame rollout record (frame 0 = initial state)."""

    q: jnp.ndarray  # (T+1, n)
    qd: jnp.ndarray
    obj_quat: jnp.ndarray  # (T+1, 4)
    obj_pos: jnp.ndarray  # (T+1, 3)
    obj_linvel: jnp.ndarray
    obj_angvel: jnp.ndarray
    keypoints: jnp.ndarray  # (T+1, K, 3)


def _snapshot(cm, state: SimState):
    return (
        state.q, state.qd, state.obj_quat, state.obj_pos, state.obj_linvel,
        state.obj_angvel, kinematics.keypoint_positions(cm, state.q),
    )


def frame_step(
    cm, grid, points, cfg, sys, state: SimState, u, root_target,
    a_points=None, extra=None,
) -> SimState:
    """Advance one frame: `cfg.substeps` substeps under constant controls."""

    def body(s, _):
        return substep(cm, grid, points, cfg, sys, s, u, root_target, a_points, extra), None

    state, _ = jax.lax.scan(body, state, None, length=cfg.substeps)
    return state


def rollout(
    cm, grid, points, cfg, sys,
    state0: SimState,
    controls: scenemod.ControlTrajectory,
    residual_fn=None,
    num_frames: int | None = None,
):
    """Roll the simulation over frames 0..T-1 of `controls`.

    Returns (FrameTrace with T+1 frames, final SimState). When a residual
    correction is supplied it is evaluated once per frame on the frame-start
    state and held constant across that frame's substeps.
    """
    T = len(controls.joint_forces) if num_frames is None else num_frames
    a_pts = controls.point_forces

    def body(s, k):
        u = controls.joint_forces[k]
        rt = controls.root_velocities[k]
        ap = a_pts[k] if a_pts is not None else None
        extra = residual_fn(s) if residual_fn is not None else None
        s2 = frame_step(cm, grid, points, cfg, sys, s, u, rt, ap, extra)
        return s2, _snapshot(cm, s2)

    final, tail = jax.lax.scan(body, state0, jnp.arange(T))
    head = jax.tree.map(lambda x: x[None], _snapshot(cm, state0))
    stack = jax.tree.map(lambda h, t: jnp.concatenate([h, t], axis=0), head, tail)
    return FrameTrace(*stack), final


def make_rollout_fn(cm, grid, points, residual_fn=None):
    """Build a reusable jitted rollout(cfg, sys, state0, controls).

    The model, distance grid, point set, and residual hook are baked in as
    closure constants. Hold on to the returned callable: a fresh call here
    starts a fresh compilation cache. Re-tracing then only happens when
    static config fields (substeps, point-state switch) or array shapes
    change; stage parameters, system parameters, and controls are traced.
    """

    @jax.jit
    def run(cfg, sys, state0, controls):
        return rollout(cm, grid, points, cfg, sys, state0, controls, residual_fn)

    return run


# ------------------------------------------------------------------ NaN guard


def check_finite_state(state: SimState, where: str = "state") -> None:
    """Raise naming the first non-finite field (debug path, not jittable)."""
    for name in ("q", "qd", "obj_quat", "obj_pos", "obj_linvel", "obj_angvel",
                 "delta", "delta_vel"):
        arr = np.asarray(getattr(state, name))
        if arr.size and not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise FloatingPointError(
                f"{where}: non-finite value in {name} at index {tuple(int(b) for b in bad)}"
            )


def substep_checked(cm, grid, points, cfg, sys, state, u, root_target,
                    a_points=None, extra=None) -> SimState:
    """Eager substep that names the first non-finite derived quantity."""
    x, v, J = _hand_points(cm, points, state, cfg)
    for name, arr in (("point positions", x), ("point velocities", v), ("jacobian", J)):
        if not np.all(np.isfinite(np.asarray(arr))):
            raise FloatingPointError(f"non-finite {name}")
    pairs = contactmod.detect_contacts(
        state.pairs, grid, x, state.obj_quat, state.obj_pos, cfg.contact.d_c
    )
    f_n, f_f, _ = contactmod.pair_forces(
        pairs, grid, x, v, state.obj_quat, state.obj_pos,
        state.obj_linvel, state.obj_angvel, cfg.contact,
    )
    for name, arr in (("contact normal force", f_n), ("friction force", f_f)):
        if not np.all(np.isfinite(np.asarray(arr))):
            raise FloatingPointError(f"non-finite {name}")
    M = kinematics.mass_matrix(cm, state.q)
    if not np.all(np.isfinite(np.asarray(M))):
        raise FloatingPointError("non-finite mass matrix")
    bias = kinematics.bias_force(cm, state.q, state.qd)
    if not np.all(np.isfinite(np.asarray(bias))):
        raise FloatingPointError("non-finite bias force")
    out = substep(cm, grid, points, cfg, sys, state, u, root_target, a_points, extra)
    check_finite_state(out, "after substep")
    return out
