"""Spring-damper contact and penalty friction between hand points and the
object SDF.

Pairs are persistent: a hand point entering the contact range is anchored to
its nearest object-surface point (stored in the object frame, so the anchor
rides along with the object). The pair survives until the static-friction
bound fails (a dynamic-friction substep fires and the pair breaks) or the
point retreats past twice the contact range.

All functions are pure, fixed-shape, and differentiable in the continuous
quantities; the discrete masks (activation, stick/slip) act as constants of
each substep.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp

from . import quat
from . import sdf as sdfmod

MU = 10.0  # fixed friction ratio between tangential bound and normal force


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class ContactParams:
    d_c: jnp.ndarray  # contact range, m
    k_n: jnp.ndarray  # normal spring, N/m
    k_d: jnp.ndarray  # normal damping, N s/m^2
    k_f: jnp.ndarray  # tangential spring, N/m
    mu: jnp.ndarray  # friction ratio


def make_contact_params(d_c, k_n, k_d, k_f, mu=MU) -> ContactParams:
    as64 = lambda v: jnp.asarray(v, dtype=jnp.float64)
    return ContactParams(as64(d_c), as64(k_n), as64(k_d), as64(k_f), as64(mu))


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class PairState:
    """One slot per hand point; at most one live pair per point."""

    active: jnp.ndarray  # (P,) bool
    anchor: jnp.ndarray  # (P,3) object frame, m
    normal: jnp.ndarray  # (P,3) object frame, unit, outward
    mode: jnp.ndarray  # (P,) 0 = static, 1 = dynamic fired this substep


def empty_pairs(num_points: int) -> PairState:
    return PairState(
        active=jnp.zeros(num_points, dtype=bool),
        anchor=jnp.zeros((num_points, 3)),
        normal=jnp.tile(jnp.array([0.0, 0.0, 1.0]), (num_points, 1)),
        mode=jnp.zeros(num_points, dtype=jnp.int8),
    )


def detect_contacts(
    pairs: PairState,
    grid: sdfmod.SdfGrid,
    p_world: jnp.ndarray,
    obj_quat: jnp.ndarray,
    obj_pos: jnp.ndarray,
    d_c,
) -> PairState:
    """Open new pairs for free points within range; existing pairs persist."""
    p_obj = quat.rotate_inverse(obj_quat, p_world - obj_pos)
    sd, n_obj, nearest_obj = sdfmod.sdf_query(grid, p_obj)
    fresh = (~pairs.active) & (sd < d_c)
    anchor = jnp.where(fresh[:, None], nearest_obj, pairs.anchor)
    normal = jnp.where(fresh[:, None], n_obj, pairs.normal)
    return PairState(
        active=pairs.active | fresh,
        anchor=anchor,
        normal=normal,
        mode=jnp.where(fresh, jnp.int8(0), pairs.mode),
    )


def contact_force_magnitude(d, rate, cp: ContactParams):
    """Normal force magnitude: spring k_n·d plus damping that resists approach
    (rate is the separation speed, negative while closing); never adhesive."""
    return jnp.maximum(cp.k_n * d - cp.k_d * d * rate, 0.0)


def pair_forces(
    pairs: PairState,
    grid: sdfmod.SdfGrid,
    p_world: jnp.ndarray,  # (P,3) hand point positions
    v_world: jnp.ndarray,  # (P,3) hand point velocities
    obj_quat: jnp.ndarray,
    obj_pos: jnp.ndarray,  # object COM
    obj_linvel: jnp.ndarray,
    obj_angvel: jnp.ndarray,
    cp: ContactParams,
):
    """Forces applied to the object, one slot per hand point.

    Returns (f_normal (P,3), f_friction (P,3), pairs_after) where pairs_after
    has dynamic-friction and out-of-range pairs retired. Hand points receive
    the negated forces via accumulate_wrenches.
    """
    act = pairs.active
    actf = act[:, None]

    p_obj = quat.rotate_inverse(obj_quat, p_world - obj_pos)
    sd, _, _ = sdfmod.sdf_query(grid, p_obj)
    depth = jnp.maximum(cp.d_c - sd, 0.0)

    n_world = quat.rotate(obj_quat, pairs.normal)
    anchor_w = quat.rotate(obj_quat, pairs.anchor) + obj_pos
    v_anchor = obj_linvel + jnp.cross(obj_angvel, anchor_w - obj_pos)
    v_rel = v_world - v_anchor

    rate = jnp.sum(n_world * v_rel, axis=-1)  # separation speed along the normal
    mag = contact_force_magnitude(depth, rate, cp)
    f_normal = -mag[:, None] * n_world * actf

    # static friction: tangential spring from the anchor. Norms are guarded so
    # reverse-mode stays finite at exactly-zero displacement or slip (the
    # common resting case); the guarded branch pins the value, it never
    # reroutes physics.
    disp = p_world - anchor_w
    t_disp = disp - n_world * jnp.sum(n_world * disp, axis=-1, keepdims=True)
    f_static = cp.k_f * t_disp
    fs_sq = jnp.sum(f_static * f_static, axis=-1)
    fs_norm = jnp.where(fs_sq < 1e-36, 0.0, jnp.sqrt(jnp.where(fs_sq < 1e-36, 1.0, fs_sq)))
    stick = fs_norm <= cp.mu * mag

    # dynamic friction: drags the object along the point's tangential slip
    t_v = v_rel - n_world * jnp.sum(n_world * v_rel, axis=-1, keepdims=True)
    moving = jnp.sum(t_v * t_v, axis=-1) > 1e-18
    safe_tv = jnp.where(moving[:, None], t_v, jnp.array([1.0, 0.0, 0.0]))
    t_dir = safe_tv / jnp.linalg.norm(safe_tv, axis=-1, keepdims=True)
    f_dynamic = jnp.where(moving[:, None], (cp.mu * fs_norm)[:, None] * t_dir, 0.0)

    f_friction = jnp.where(stick[:, None], f_static, f_dynamic) * actf

    broke = act & ~stick
    out_of_range = act & (sd > 2.0 * cp.d_c)
    pairs_after = PairState(
        active=act & ~broke & ~out_of_range,
        anchor=pairs.anchor,
        normal=pairs.normal,
        mode=jnp.where(broke, jnp.int8(1), jnp.int8(0)),
    )
    return f_normal, f_friction, pairs_after


def accumulate_wrenches(
    f_normal: jnp.ndarray,  # (P,3) on the object
    f_friction: jnp.ndarray,  # (P,3) on the object
    anchor_world: jnp.ndarray,  # (P,3) application points
    obj_pos: jnp.ndarray,  # COM
    point_jac: jnp.ndarray,  # (P,3,n) hand point Jacobians
    alpha,
):
    """Split contact forces between the object and the hand.

    Returns (hand generalized force (n,), object force (3,), object torque
    about COM (3,), per-point hand forces (P,3) for the relaxed point state).
    """
    f_obj = f_normal + f_friction
    force = jnp.sum(f_obj, axis=0)
    torque = jnp.sum(jnp.cross(anchor_world - obj_pos, f_obj), axis=0)
    reaction = -f_obj
    gen = (1.0 - alpha) * jnp.einsum("pin,pi->n", point_jac, reaction)
    point_forces = alpha * reaction
    return gen, force, torque, point_forces


def anchor_world_positions(pairs: PairState, obj_quat, obj_pos):
    return quat.rotate(obj_quat, pairs.anchor) + obj_pos
