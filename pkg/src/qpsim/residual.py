"""Learned residual contact physics.

Two permutation-invariant point networks correct the analytical simulator:
a local network emits per-contact-pair force corrections and a global
network emits a force/torque correction at the object's center of mass.
Each encodes a sampled point region (hand side + object side) with a
per-point MLP followed by max-pooling, so predictions are exactly invariant
to point order. Output heads are zero-initialized: an untrained residual
leaves the analytical simulator bit-for-bit unchanged.
"""

from __future__ import annotations

import dataclasses
import struct

import jax
import jax.numpy as jnp
import numpy as np

from . import adam, kinematics, quat
from . import contact as contactmod
from . import mesh as meshmod
from . import scene as scenemod
from . import sdf as sdfmod
from . import simulator

HAND, OBJECT = 0, 1  # point-type vocabulary


@dataclasses.dataclass(frozen=True)
class ResidualConfig:
    """Network and region-sampling sizes (static: closure constant for jit)."""

    encoder_widths: tuple[int, ...] = (128, 256, 512, 1024)
    head_widths: tuple[int, ...] = (512, 256, 128)
    embed_dim: int = 128
    n_local: int = 100  # sampled points per side, local regions
    n_global: int = 500  # sampled points per side, global region
    local_range: float = 0.05  # m around a contact anchor
    global_range: float = 0.1  # m from the object surface
    max_pairs: int = 8  # local regions evaluated per frame
    force_cap: float = 10.0  # N, bound on any residual force component
    torque_cap: float = 1.0  # N m, bound on the global residual torque


def desk_profile() -> ResidualConfig:
    """Reduced sizes that keep CPU training of the bundled scene snappy."""
    return ResidualConfig(
        encoder_widths=(32, 64, 96, 128),
        head_widths=(64, 48, 32),
        embed_dim=32,
        n_local=64,
        n_global=256,
    )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class ResidualWeights:
    local_encoder: tuple  # ((W, b), ...) per-point MLP
    local_head: tuple  # ((W, b), ...) pooled-feature MLP, 6 outputs
    global_encoder: tuple
    global_head: tuple
    type_embed: jnp.ndarray  # (2, embed_dim)


def _mlp_shapes(in_dim: int, widths: tuple[int, ...], out_dim: int | None):
    dims = [in_dim, *widths] + ([out_dim] if out_dim is not None else [])
    return list(zip(dims[:-1], dims[1:]))


def init_weights(cfg: ResidualConfig, seed: int = 0) -> ResidualWeights:
    """Fan-in uniform init; the final layer of each head starts at zero."""
    rng = np.random.default_rng(seed)

    def layer(n_in, n_out, zero=False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        return jnp.asarray(w), jnp.zeros(n_out)

    in_dim = 9 + cfg.embed_dim  # position, velocity, normal, type embedding

    def encoder():
        return tuple(layer(a, b) for a, b in _mlp_shapes(in_dim, cfg.encoder_widths, None))

    def head():
        shapes = _mlp_shapes(cfg.encoder_widths[-1], cfg.head_widths, 6)
        return tuple(
            layer(a, b, zero=(i == len(shapes) - 1)) for i, (a, b) in enumerate(shapes)
        )

    embed = jnp.asarray(rng.normal(scale=0.1, size=(2, cfg.embed_dim)))
    return ResidualWeights(encoder(), head(), encoder(), head(), embed)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class ContactRegionFeatures:
    """Fixed-size region sample: hand rows first, then object rows."""

    positions: jnp.ndarray  # (N,3) relative to the region anchor
    velocities: jnp.ndarray  # (N,3) world
    normals: jnp.ndarray  # (N,3) outward for object points, zero for hand
    ptype: jnp.ndarray  # (N,) int32 in {HAND, OBJECT}


def farthest_point_indices(points, mask, count: int, seed: int = 0):
    """Deterministic farthest-point sampling of `count` indices.

    Only rows with mask=True are eligible; once they are exhausted the
    selection repeats them (sampling with replacement). The start index is
    the (seed mod n_valid)-th eligible row.
    """
    n_valid = jnp.maximum(jnp.sum(mask), 1)
    rank = jnp.asarray(seed, dtype=jnp.int32) % n_valid.astype(jnp.int32) + 1
    start = jnp.argmax((jnp.cumsum(mask) == rank) & mask)

    neg = -1e30
    dist0 = jnp.where(mask, 1e30, neg)

    def body(carry, _):
        dist, last = carry
        d_last = jnp.sum((points - points[last]) ** 2, axis=-1)
        dist = jnp.minimum(dist, jnp.where(mask, d_last, neg))
        pick = jnp.argmax(dist)
        return (dist, pick), pick

    if count == 1:
        return start[None]
    (_, _), rest = jax.lax.scan(body, (dist0, start), None, length=count - 1)
    return jnp.concatenate([start[None], rest])


def extract_region(
    anchor,
    hand_positions,
    hand_velocities,
    object_positions,
    object_velocities,
    object_normals,
    *,
    n_per_side: int,
    max_distance,
    hand_mask=None,
    object_mask=None,
    seed: int = 0,
) -> ContactRegionFeatures:
    """Sample a two-sided point region around `anchor`.

    Candidates farther than `max_distance` from the anchor are excluded, as
    are rows where the optional per-side masks are False. Each side is
    reduced to exactly `n_per_side` rows by farthest-point sampling.
    """

    def side(pos, vel, nrm, extra_mask, ptype):
        within = jnp.sum((pos - anchor) ** 2, axis=-1) <= max_distance**2
        mask = within if extra_mask is None else within & extra_mask
        idx = farthest_point_indices(pos, mask, n_per_side, seed)
        valid = mask[idx]
        keep = lambda a: jnp.where(valid[:, None], a[idx], 0.0)
        return (
            keep(pos - anchor),
            keep(vel),
            keep(nrm) if nrm is not None else jnp.zeros((n_per_side, 3)),
            jnp.full(n_per_side, ptype, dtype=jnp.int32),
        )

    h = side(hand_positions, hand_velocities, None, hand_mask, HAND)
    o = side(object_positions, object_velocities, object_normals, object_mask, OBJECT)
    return ContactRegionFeatures(
        positions=jnp.concatenate([h[0], o[0]]),
        velocities=jnp.concatenate([h[1], o[1]]),
        normals=jnp.concatenate([h[2], o[2]]),
        ptype=jnp.concatenate([h[3], o[3]]),
    )


def _apply_net(encoder, head, embed, feats: ContactRegionFeatures):
    x = jnp.concatenate(
        [feats.positions, feats.velocities, feats.normals, embed[feats.ptype]], axis=-1
    )
    for w, b in encoder:
        x = jax.nn.relu(x @ w + b)
    pooled = jnp.max(x, axis=0)
    for w, b in head[:-1]:
        pooled = jax.nn.relu(pooled @ w + b)
    w, b = head[-1]
    return pooled @ w + b


def _squash(x, cap):
    return cap * jnp.tanh(x / cap)


def predict_residual(
    feats: ContactRegionFeatures,
    weights: ResidualWeights,
    mode: str,
    force_cap: float = 10.0,
    torque_cap: float = 1.0,
):
    """Local mode: (contact force, friction force) for one pair. Global mode:
    (force, torque) at the object COM. All outputs are tanh-bounded."""
    if mode == "local":
        raw = _apply_net(weights.local_encoder, weights.local_head, weights.type_embed, feats)
        return _squash(raw[:3], force_cap), _squash(raw[3:], force_cap)
    if mode == "global":
        raw = _apply_net(weights.global_encoder, weights.global_head, weights.type_embed, feats)
        return _squash(raw[:3], force_cap), _squash(raw[3:], torque_cap)
    raise ValueError(f"mode must be 'local' or 'global', got {mode!r}")


def object_surface_points(obj: scenemod.ObjectSpec, count: int, seed: int = 0):
    """Sample (positions, outward normals) on the object surface, object frame."""
    m = obj.shape.to_mesh()
    pts, normals = meshmod.sample_surface(m, count, np.random.default_rng(seed))
    return jnp.asarray(pts), jnp.asarray(normals)


def residual_wrench(cm, grid, points, rcfg: ResidualConfig, surface, weights, state):
    """Per-frame residual correction: (generalized hand force, object force,
    object torque). Local pair outputs act at their contact anchors with the
    reaction mapped back to the hand; the global output acts at the COM."""
    surf_pts, surf_nrm = surface
    x = kinematics.transform_points(cm, state.q, points.body, points.local)
    J = kinematics.point_set_jacobian(cm, state.q, points.body, points.local)
    v = jnp.einsum("pij,j->pi", J, state.qd)

    obj_pts = quat.rotate(state.obj_quat, surf_pts) + state.obj_pos
    obj_nrm = quat.rotate(state.obj_quat, surf_nrm)
    obj_vel = state.obj_linvel + jnp.cross(
        state.obj_angvel, obj_pts - state.obj_pos
    )

    p_obj = quat.rotate_inverse(state.obj_quat, x - state.obj_pos)
    sd, _, _ = sdfmod.sdf_query(grid, p_obj)

    gfeat = extract_region(
        state.obj_pos, x, v, obj_pts, obj_vel, obj_nrm,
        n_per_side=rcfg.n_global, max_distance=jnp.inf,
        hand_mask=sd < rcfg.global_range,
    )
    d_force, d_torque = predict_residual(
        gfeat, weights, "global", rcfg.force_cap, rcfg.torque_cap
    )

    # deepest pairs get the local corrections
    k = min(rcfg.max_pairs, points.count)
    score = jnp.where(state.pairs.active, -sd, -1e30)
    _, slots = jax.lax.top_k(score, k)
    valid = state.pairs.active[slots]
    anchors = quat.rotate(state.obj_quat, state.pairs.anchor[slots]) + state.obj_pos
    anchor_vel = state.obj_linvel + jnp.cross(state.obj_angvel, anchors - state.obj_pos)
    anchor_nrm = quat.rotate(state.obj_quat, state.pairs.normal[slots])

    def one_pair(anchor, a_vel, a_nrm):
        obj_p = jnp.concatenate([anchor[None], obj_pts])
        obj_v = jnp.concatenate([a_vel[None], obj_vel])
        obj_n = jnp.concatenate([a_nrm[None], obj_nrm])
        feats = extract_region(
            anchor, x, v, obj_p, obj_v, obj_n,
            n_per_side=rcfg.n_local, max_distance=rcfg.local_range,
        )
        fc, ff = predict_residual(feats, weights, "local", rcfg.force_cap)
        return fc + ff

    pair_force = jax.vmap(one_pair)(anchors, anchor_vel, anchor_nrm)
    pair_force = pair_force * valid[:, None]

    force = d_force + jnp.sum(pair_force, axis=0)
    torque = d_torque + jnp.sum(
        jnp.cross(anchors - state.obj_pos, pair_force), axis=0
    )
    # reaction on the hand through the paired points' Jacobians
    gen = -jnp.einsum("kin,ki->n", J[slots], pair_force)
    return gen, force, torque


def make_residual_fn(cm, grid, points, rcfg, surface, weights):
    """Bind everything but the state; suitable for simulator.rollout."""

    def fn(state):
        return residual_wrench(cm, grid, points, rcfg, surface, weights, state)

    return fn


def make_residual_rollout(cm, grid, points, rcfg, surface):
    """Jitted rollout whose residual weights are a traced argument, so the
    same compiled program serves both training and evaluation."""

    @jax.jit
    def run(weights, cfg, sysp, state0, controls):
        fn = make_residual_fn(cm, grid, points, rcfg, surface, weights)
        return simulator.rollout(cm, grid, points, cfg, sysp, state0, controls, fn)

    return run


# --------------------------------------------------------------- training


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class RolloutWindow:
    """One training window: a start state, the controls applied from it, and
    the target simulator's resulting per-frame states.

    Contact pair anchoring restarts at the window start: anchors and their
    friction-spring stretch are simulator-internal state that a black-box
    target does not expose, so windows carry only observable state."""

    q0: jnp.ndarray  # (n,)
    qd0: jnp.ndarray
    obj_quat0: jnp.ndarray  # (4,)
    obj_pos0: jnp.ndarray  # (3,)
    obj_linvel0: jnp.ndarray
    obj_angvel0: jnp.ndarray
    joint_forces: jnp.ndarray  # (L,n)
    root_velocities: jnp.ndarray  # (L,6)
    target_q: jnp.ndarray  # (L,n) frames 1..L
    target_obj_quat: jnp.ndarray  # (L,4)
    target_obj_pos: jnp.ndarray  # (L,3)


def stack_windows(windows) -> RolloutWindow:
    return jax.tree.map(lambda *xs: jnp.stack(xs), *windows)


def _start_state(w: RolloutWindow, num_points: int) -> simulator.SimState:
    return simulator.SimState(
        q=w.q0, qd=w.qd0, obj_quat=w.obj_quat0, obj_pos=w.obj_pos0,
        obj_linvel=w.obj_linvel0, obj_angvel=w.obj_angvel0,
        delta=jnp.zeros((0, 3)), delta_vel=jnp.zeros((0, 3)),
        pairs=contactmod.empty_pairs(num_points),
    )


def rotation_chord(a, b):
    """Smooth double-cover-safe rotation discrepancy, ~ (angle/2)^2 near 0."""
    return 2.0 * (1.0 - jnp.abs(jnp.sum(a * b, axis=-1)))


def window_loss(cm, grid, points, rcfg, surface, cfg, sysp, weights, w: RolloutWindow):
    """Mean squared state-prediction error over one window. Translation is
    measured in centimeters and rotation weighted to match, so millimeter-scale
    errors produce gradients well above the optimizer's epsilon floor."""
    state0 = _start_state(w, points.count)
    controls = scenemod.ControlTrajectory(w.joint_forces, w.root_velocities)
    fn = make_residual_fn(cm, grid, points, rcfg, surface, weights)
    trace, _ = simulator.rollout(cm, grid, points, cfg, sysp, state0, controls, fn)
    rot = 100.0 * rotation_chord(trace.obj_quat[1:], w.target_obj_quat)
    pos = jnp.sum((100.0 * (trace.obj_pos[1:] - w.target_obj_pos)) ** 2, axis=-1)
    joint = jnp.mean((trace.q[1:] - w.target_q) ** 2, axis=-1)
    return jnp.mean(rot + pos + joint)


def make_trainer(cm, grid, points, rcfg: ResidualConfig, surface):
    """Build a reusable fit(weights, windows, steps, lr, ...) -> (weights,
    losses with one entry per step, recorded before each update).

    Hold on to the returned callable: repeat fits with the same window count,
    window length, and step count share one compiled update program."""

    @jax.jit
    def sweep(weights, opt, picks, stacked, lr, cfg, sysp):
        def batch_loss(wts, idx):
            batch = jax.tree.map(lambda x: x[idx], stacked)
            per = jax.vmap(
                lambda one: window_loss(cm, grid, points, rcfg, surface, cfg, sysp, wts, one)
            )(batch)
            return jnp.mean(per)

        def body(carry, idx):
            wts, opt = carry
            loss, grads = jax.value_and_grad(batch_loss)(wts, idx)
            opt, wts = adam.update(opt, grads, wts, lr)
            return (wts, opt), loss

        (weights, opt), losses = jax.lax.scan(body, (weights, opt), picks)
        return weights, losses

    def fit(weights, windows, steps, lr, *, cfg, sysp, batch_size=4, seed=0):
        if len(windows) == 0:
            raise ValueError("replay buffer is empty")
        if cfg.with_points:
            raise ValueError("residual training runs on the rigid point set")
        if steps == 0:
            return weights, jnp.zeros(0)
        batch_size = min(batch_size, len(windows))
        rng = np.random.default_rng(seed)
        picks = jnp.asarray(
            rng.integers(0, len(windows), size=(steps, batch_size)), dtype=jnp.int32
        )
        weights, losses = sweep(
            weights, adam.init(weights), picks, stack_windows(list(windows)),
            jnp.asarray(lr, dtype=jnp.float64), cfg, sysp,
        )
        return weights, losses

    return fit


def train_residual(
    weights: ResidualWeights,
    windows,
    steps: int,
    lr: float,
    *,
    cm,
    grid,
    points,
    rcfg: ResidualConfig,
    surface,
    cfg,
    sysp,
    batch_size: int = 4,
    seed: int = 0,
):
    """One-shot Adam run on the mean window loss over minibatches. For
    repeated fits build the trainer once with make_trainer."""
    fit = make_trainer(cm, grid, points, rcfg, surface)
    return fit(weights, windows, steps, lr, cfg=cfg, sysp=sysp,
               batch_size=batch_size, seed=seed)


# --------------------------------------------------------------- checkpoints

_MAGIC = b"QRES"


def _flatten(weights: ResidualWeights):
    arrays = [weights.type_embed]
    for group in (weights.local_encoder, weights.local_head,
                  weights.global_encoder, weights.global_head):
        for w, b in group:
            arrays.extend([w, b])
    return arrays


def save_weights(path: str, cfg: ResidualConfig, weights: ResidualWeights) -> None:
    arrays = [np.asarray(a, dtype=np.float64) for a in _flatten(weights)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        for widths in (cfg.encoder_widths, cfg.head_widths):
            fh.write(struct.pack("<I", len(widths)))
            fh.write(struct.pack(f"<{len(widths)}I", *widths))
        fh.write(struct.pack("<4I", cfg.embed_dim, cfg.n_local, cfg.n_global,
                             cfg.max_pairs))
        fh.write(struct.pack("<4d", cfg.local_range, cfg.global_range,
                             cfg.force_cap, cfg.torque_cap))
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def load_weights(path: str):
    """Read a checkpoint; returns (ResidualConfig, ResidualWeights)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a residual checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")

    def read_widths():
        nonlocal off
        (k,) = struct.unpack_from("<I", raw, off)
        off += 4
        vals = struct.unpack_from(f"<{k}I", raw, off)
        off += 4 * k
        return tuple(vals)

    enc_w, head_w = read_widths(), read_widths()
    embed_dim, n_local, n_global, max_pairs = struct.unpack_from("<4I", raw, off)
    off += 16
    local_range, global_range, force_cap, torque_cap = struct.unpack_from("<4d", raw, off)
    off += 32
    cfg = ResidualConfig(enc_w, head_w, embed_dim, n_local, n_global,
                         local_range, global_range, max_pairs, force_cap, torque_cap)

    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    shapes = []
    for _ in range(n_arrays):
        (nd,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{nd}I", raw, off)
        off += 4 * nd
        shapes.append(shape)
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        arrays.append(jnp.asarray(a))

    embed = arrays[0]
    i = 1
    local_enc, i = _take_layers(arrays, i, len(enc_w))
    local_head, i = _take_layers(arrays, i, len(head_w) + 1)
    global_enc, i = _take_layers(arrays, i, len(enc_w))
    global_head, i = _take_layers(arrays, i, len(head_w) + 1)
    if i != len(arrays):
        raise ValueError("checkpoint layer table does not match its config")
    return cfg, ResidualWeights(local_enc, local_head, global_enc, global_head, embed)


def _take_layers(arrays, idx, count):
    group = []
    for _ in range(count):
        group.append((arrays[idx], arrays[idx + 1]))
        idx += 2
    return tuple(group), idx
