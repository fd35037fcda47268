"""Reduced-coordinate kinematics for tree-structured articulated bodies.

Every model joint is expanded into 1-DoF elementary joints: a free root
becomes three world-axis prismatic DoFs followed by three chained revolute
DoFs (intrinsic x-y-z). Structure arrays are plain numpy and act as
compile-time constants; all functions of q are jax-traceable and unrolled
over the (small) joint count.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from . import scene as scenemod

PRISMATIC_ELEM = 0
REVOLUTE_ELEM = 1

_EYE3 = np.eye(3)


@dataclasses.dataclass(frozen=True)
class CompiledModel:
    """Static structure derived from an ArticulatedModel (not a pytree)."""

    n_dof: int
    elem_parent: tuple[int, ...]
    elem_type: np.ndarray  # (n,) 0 prismatic | 1 revolute
    elem_axis: np.ndarray  # (n,3) unit, in the parent elementary frame
    elem_origin: np.ndarray  # (n,3) offset from parent frame, parent coords
    link_elem: np.ndarray  # (L,) final elementary joint of each link
    link_mask: np.ndarray  # (L,n) 1.0 where DoF drives the link
    link_mass: np.ndarray  # (L,)
    link_inertia: np.ndarray  # (L,3,3) about COM, link frame
    link_com: np.ndarray  # (L,3) COM in link frame
    dof_damping: np.ndarray  # (n,)
    dof_stiffness: np.ndarray  # (n,)
    dof_lower: np.ndarray  # (n,)
    dof_upper: np.ndarray  # (n,)
    root_dofs: np.ndarray  # (n,) 1.0 on the 6 free-root DoFs
    kp_link: np.ndarray  # (K,)
    kp_offset: np.ndarray  # (K,3)


def compile_model(model: scenemod.ArticulatedModel) -> CompiledModel:
    parent_e: list[int] = []
    etype: list[int] = []
    eaxis: list[np.ndarray] = []
    eorigin: list[np.ndarray] = []
    damping: list[float] = []
    stiffness: list[float] = []
    lower: list[float] = []
    upper: list[float] = []
    rootdof: list[float] = []
    link_elem: list[int] = []

    for link, joint in zip(model.links, model.joints):
        pe = link_elem[link.parent] if link.parent >= 0 else -1
        if joint.kind == scenemod.FREE:
            for k in range(3):
                parent_e.append(pe if k == 0 else len(parent_e) - 1)
                etype.append(PRISMATIC_ELEM)
                eaxis.append(_EYE3[k])
                eorigin.append(np.asarray(joint.origin) if k == 0 else np.zeros(3))
                damping.append(0.0)
                stiffness.append(0.0)
                lower.append(-1e9)
                upper.append(1e9)
                rootdof.append(1.0)
            for k in range(3):
                parent_e.append(len(parent_e) - 1)
                etype.append(REVOLUTE_ELEM)
                eaxis.append(_EYE3[k])
                eorigin.append(np.zeros(3))
                damping.append(0.0)
                stiffness.append(0.0)
                lower.append(-1e9)
                upper.append(1e9)
                rootdof.append(1.0)
        else:
            parent_e.append(pe)
            etype.append(REVOLUTE_ELEM if joint.kind == scenemod.REVOLUTE else PRISMATIC_ELEM)
            eaxis.append(np.asarray(joint.axis, dtype=np.float64))
            eorigin.append(np.asarray(joint.origin, dtype=np.float64))
            damping.append(joint.damping)
            stiffness.append(joint.stiffness)
            lower.append(joint.limit_lower)
            upper.append(joint.limit_upper)
            rootdof.append(0.0)
        link_elem.append(len(parent_e) - 1)

    n = len(parent_e)
    mask = np.zeros((len(model.links), n))
    for li, le in enumerate(link_elem):
        j = le
        while j >= 0:
            mask[li, j] = 1.0
            j = parent_e[j]

    return CompiledModel(
        n_dof=n,
        elem_parent=tuple(parent_e),
        elem_type=np.array(etype),
        elem_axis=np.array(eaxis),
        elem_origin=np.array(eorigin),
        link_elem=np.array(link_elem),
        link_mask=mask,
        link_mass=np.array([l.mass for l in model.links]),
        link_inertia=np.array([l.inertia for l in model.links]),
        link_com=np.array([l.com for l in model.links]),
        dof_damping=np.array(damping),
        dof_stiffness=np.array(stiffness),
        dof_lower=np.array(lower),
        dof_upper=np.array(upper),
        root_dofs=np.array(rootdof),
        kp_link=np.array([k.link for k in model.keypoints], dtype=np.int64),
        kp_offset=(
            np.array([k.offset for k in model.keypoints]).reshape(-1, 3)
        ),
    )


def _rodrigues(axis: np.ndarray, angle):
    """Rotation matrix about a constant unit axis, traceable in the angle."""
    k = jnp.asarray(axis)
    kx = jnp.array(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
    )
    c, s = jnp.cos(angle), jnp.sin(angle)
    return c * jnp.eye(3) + s * kx + (1.0 - c) * jnp.outer(k, k)


def fk_frames(cm: CompiledModel, q):
    """World rotation (n,3,3), origin (n,3), and DoF axis (n,3) per elementary joint."""
    Rs, ts, axes = [], [], []
    for j in range(cm.n_dof):
        p = cm.elem_parent[j]
        Rp = Rs[p] if p >= 0 else jnp.eye(3)
        tp = ts[p] if p >= 0 else jnp.zeros(3)
        axis_w = Rp @ cm.elem_axis[j]
        o_w = tp + Rp @ cm.elem_origin[j]
        if cm.elem_type[j] == PRISMATIC_ELEM:
            Rs.append(Rp)
            ts.append(o_w + axis_w * q[j])
        else:
            Rs.append(Rp @ _rodrigues(cm.elem_axis[j], q[j]))
            ts.append(o_w)
        axes.append(axis_w)
    return jnp.stack(Rs), jnp.stack(ts), jnp.stack(axes)


def link_frames(cm: CompiledModel, q):
    """World rotation (L,3,3) and origin (L,3) of every link frame."""
    R, t, _ = fk_frames(cm, q)
    return R[cm.link_elem], t[cm.link_elem]


def point_jacobian(cm: CompiledModel, q, link: int, local_point):
    """J (3, n_dof) with J @ q̇ = world velocity of the rigidly attached point."""
    R, t, axes = fk_frames(cm, q)
    x = R[cm.link_elem[link]] @ jnp.asarray(local_point) + t[cm.link_elem[link]]
    return _point_jacobian_from_frames(cm, t, axes, int(link), x), x


def _point_jacobian_from_frames(cm: CompiledModel, t, axes, link_idx, x_world):
    """Jacobian columns given precomputed frames; x_world (...,3) -> (...,3,n)."""
    lever = x_world[..., None, :] - t  # (...,n,3)
    rev = jnp.cross(axes, lever)
    prism = jnp.broadcast_to(axes, rev.shape)
    cols = jnp.where((cm.elem_type == REVOLUTE_ELEM)[:, None], rev, prism)
    cols = cols * cm.link_mask[link_idx][:, None]
    return jnp.swapaxes(cols, -1, -2)


def _angular_jacobian(cm: CompiledModel, axes, link_idx):
    cols = axes * ((cm.elem_type == REVOLUTE_ELEM) * cm.link_mask[link_idx])[:, None]
    return cols.T  # (3, n)


def mass_matrix(cm: CompiledModel, q):
    """Joint-space inertia M(q), symmetric positive definite."""
    R, t, axes = fk_frames(cm, q)
    n = cm.n_dof
    M = jnp.zeros((n, n))
    for l in range(len(cm.link_mass)):
        Rl = R[cm.link_elem[l]]
        com_w = Rl @ cm.link_com[l] + t[cm.link_elem[l]]
        Jv = _point_jacobian_from_frames(cm, t, axes, l, com_w)
        Jw = _angular_jacobian(cm, axes, l)
        Iw = Rl @ cm.link_inertia[l] @ Rl.T
        M = M + cm.link_mass[l] * Jv.T @ Jv + Jw.T @ Iw @ Jw
    return 0.5 * (M + M.T)


def kinetic_energy(cm: CompiledModel, q, qd):
    return 0.5 * qd @ mass_matrix(cm, q) @ qd


def bias_force(cm: CompiledModel, q, qd):
    """Velocity-product force f with M q̈ = f + (applied forces).

    Recursive Newton-Euler sweep with zero joint accelerations: propagate
    velocities and velocity-product accelerations root to tip, gather the
    inertial wrench of every link, accumulate wrenches tip to root, and
    project onto the joint axes. No hand gravity enters here; gravity acts
    on the object only.
    """
    R, t, axes = fk_frames(cm, q)
    n = cm.n_dof
    zero = jnp.zeros(3)
    w: list = [None] * n  # angular velocity of each elementary frame
    v: list = [None] * n  # linear velocity of the frame origin
    dw: list = [None] * n  # angular acceleration (velocity-product part)
    dv: list = [None] * n  # linear acceleration of the frame origin
    for j in range(n):
        p = cm.elem_parent[j]
        wp = w[p] if p >= 0 else zero
        vp = v[p] if p >= 0 else zero
        awp = dw[p] if p >= 0 else zero
        avp = dv[p] if p >= 0 else zero
        tp = t[p] if p >= 0 else zero
        r = t[j] - tp
        s = axes[j]
        sdot = jnp.cross(wp, s)  # joint axis is rigid in the parent frame
        if cm.elem_type[j] == REVOLUTE_ELEM:
            w[j] = wp + s * qd[j]
            v[j] = vp + jnp.cross(wp, r)
            dw[j] = awp + sdot * qd[j]
            dv[j] = avp + jnp.cross(awp, r) + jnp.cross(wp, v[j] - vp)
        else:
            w[j] = wp
            v[j] = vp + jnp.cross(wp, r) + s * qd[j]
            dw[j] = awp
            dv[j] = avp + jnp.cross(awp, r) + jnp.cross(wp, v[j] - vp) + qd[j] * sdot

    # inertial wrench of each link, taken about its elementary frame origin
    f_acc: list = [zero] * n
    n_acc: list = [zero] * n
    for l in range(len(cm.link_mass)):
        e = int(cm.link_elem[l])
        rc = R[e] @ cm.link_com[l]
        a_com = dv[e] + jnp.cross(dw[e], rc) + jnp.cross(w[e], jnp.cross(w[e], rc))
        F = cm.link_mass[l] * a_com
        Iw = R[e] @ cm.link_inertia[l] @ R[e].T
        N = Iw @ dw[e] + jnp.cross(w[e], Iw @ w[e])
        f_acc[e] = f_acc[e] + F
        n_acc[e] = n_acc[e] + N + jnp.cross(rc, F)

    tau = [None] * n
    for j in range(n - 1, -1, -1):
        p = cm.elem_parent[j]
        if cm.elem_type[j] == REVOLUTE_ELEM:
            tau[j] = axes[j] @ n_acc[j]
        else:
            tau[j] = axes[j] @ f_acc[j]
        if p >= 0:
            f_acc[p] = f_acc[p] + f_acc[j]
            n_acc[p] = n_acc[p] + n_acc[j] + jnp.cross(t[j] - t[p], f_acc[j])
    return -jnp.stack(tau)


def bias_force_lagrangian(cm: CompiledModel, q, qd):
    """Same bias force from the energy side: ∂T/∂q − Ṁ q̇ by autodiff.

    Slower than the recursive sweep; kept as an independent cross-check.
    """
    dT_dq = jax.grad(kinetic_energy, argnums=1)(cm, q, qd)
    _, mdot_qd = jax.jvp(lambda qq: mass_matrix(cm, qq) @ qd, (q,), (qd,))
    return dT_dq - mdot_qd


def inverse_dynamics(cm: CompiledModel, q, qd, qdd):
    """Generalized force that produces q̈ = qdd (no gravity on the hand)."""
    return mass_matrix(cm, q) @ qdd - bias_force(cm, q, qd)


def keypoint_positions(cm: CompiledModel, q):
    """World positions (K,3) of the model keypoints."""
    R, t = link_frames(cm, q)
    Rk = R[cm.kp_link]
    tk = t[cm.kp_link]
    return jnp.einsum("kij,kj->ki", Rk, cm.kp_offset) + tk


def transform_points(cm: CompiledModel, q, body: np.ndarray, local: np.ndarray | jnp.ndarray):
    """World positions (P,3) of local points (P,3) attached to links body (P,)."""
    R, t = link_frames(cm, q)
    Rb = R[body]
    tb = t[body]
    return jnp.einsum("pij,pj->pi", Rb, jnp.asarray(local)) + tb


def point_velocities(cm: CompiledModel, q, qd, body: np.ndarray, local):
    """World velocities (P,3) of rigidly attached points, via their Jacobians."""
    J = point_set_jacobian(cm, q, body, local)
    return jnp.einsum("pij,j->pi", J, qd)


def point_set_jacobian(cm: CompiledModel, q, body: np.ndarray, local):
    """Stacked Jacobians (P,3,n) for points local (P,3) on links body (P,)."""
    R, t, axes = fk_frames(cm, q)
    Rb = R[cm.link_elem[body]]
    tb = t[cm.link_elem[body]]
    x = jnp.einsum("pij,pj->pi", Rb, jnp.asarray(local)) + tb
    lever = x[:, None, :] - t[None]  # (P,n,3)
    rev = jnp.cross(axes[None], lever)
    prism = jnp.broadcast_to(axes[None], rev.shape)
    cols = jnp.where((cm.elem_type == REVOLUTE_ELEM)[None, :, None], rev, prism)
    cols = cols * cm.link_mask[body][:, :, None]
    return jnp.swapaxes(cols, -1, -2)  # (P,3,n)
