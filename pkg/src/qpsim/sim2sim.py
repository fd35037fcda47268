"""Black-box target simulator, replay buffer, fitting loop, and MPC.

The final stage treats a second simulator as ground truth: it exposes only
frame-granular stepping and observable state (joint positions, object pose
and velocity), never gradients or internals. The quasi-physical model plus
its learned residual is fitted to replayed windows of target rollouts, the
controls are refined inside the fitted model, and closed-loop MPC tracks the
demonstration through the target with per-frame re-planning.

The built-in target wraps the stiffest analytical stage with hidden
perturbations (contact stiffness and mass scales, velocity drag, a constant
torque bias), standing in for an external engine.
"""

from __future__ import annotations

import collections
import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from . import adam, kinematics, optim, residual
from . import contact as contactmod
from . import scene as scenemod
from . import simulator

BUFFER_CAPACITY = 1024
WINDOW_LENGTH = 19
DESK_ITERATION_CAP = 2000


@dataclasses.dataclass(frozen=True)
class ObservedState:
    """What a black-box simulator reports at a frame boundary: joint state
    and object pose/velocity. Contact bookkeeping stays internal."""

    q: jnp.ndarray  # (n,)
    qd: jnp.ndarray  # (n,)
    obj_quat: jnp.ndarray  # (4,) unit, wxyz
    obj_pos: jnp.ndarray  # (3,)
    obj_linvel: jnp.ndarray  # (3,)
    obj_angvel: jnp.ndarray  # (3,)


def observe(state: simulator.SimState) -> ObservedState:
    return ObservedState(
        q=state.q, qd=state.qd, obj_quat=state.obj_quat, obj_pos=state.obj_pos,
        obj_linvel=state.obj_linvel, obj_angvel=state.obj_angvel,
    )


def as_sim_state(obs: ObservedState, num_points: int,
                 with_points: bool = False) -> simulator.SimState:
    """Quasi-sim state assigned from an observation. Contact pairs and point
    relaxation restart empty: they are not observable."""
    p = num_points if with_points else 0
    return simulator.SimState(
        q=jnp.asarray(obs.q), qd=jnp.asarray(obs.qd),
        obj_quat=jnp.asarray(obs.obj_quat), obj_pos=jnp.asarray(obs.obj_pos),
        obj_linvel=jnp.asarray(obs.obj_linvel),
        obj_angvel=jnp.asarray(obs.obj_angvel),
        delta=jnp.zeros((p, 3)), delta_vel=jnp.zeros((p, 3)),
        pairs=contactmod.empty_pairs(num_points),
    )


# ------------------------------------------------------------------ targets


class BuiltinTarget:
    """Reference target: the stiffest analytical stage plus hidden physics.

    Deterministic given (reset state, control sequence). With no
    perturbations the frame advance is literally the analytical simulator's
    code path, so a zero-residual quasi-sim reproduces it bit for bit.
    """

    def __init__(self, cm, grid, points, cfg, params, *,
                 drag_lin: float = 0.0, drag_ang: float = 0.0,
                 torque_bias=(0.0, 0.0, 0.0)):
        self._cm = cm
        self._points = points
        self._cfg = cfg
        self._params = params
        self._drag = (float(drag_lin), float(drag_ang))
        self._bias = jnp.asarray(torque_bias, dtype=jnp.float64)
        self._pristine = (
            drag_lin == 0.0 and drag_ang == 0.0
            and not bool(jnp.any(self._bias != 0.0))
        )
        self._state: simulator.SimState | None = None

        if self._pristine:
            def advance(state, u, rt, cfg_, sysp):
                return simulator.frame_step(cm, grid, points, cfg_, sysp, state, u, rt)
        else:
            def advance(state, u, rt, cfg_, sysp):
                extra = (
                    jnp.zeros(cm.n_dof),
                    -self._drag[0] * state.obj_linvel,
                    -self._drag[1] * state.obj_angvel + self._bias,
                )
                return simulator.frame_step(
                    cm, grid, points, cfg_, sysp, state, u, rt, None, extra
                )

        self._advance = jax.jit(advance)

    @property
    def config(self):
        return self._cfg

    def reset(self, obs: ObservedState) -> None:
        self._state = as_sim_state(obs, self._points.count)

    def step(self, joint_forces, root_velocities) -> ObservedState:
        if self._state is None:
            raise RuntimeError("target not reset")
        self._state = self._advance(
            self._state, jnp.asarray(joint_forces), jnp.asarray(root_velocities),
            self._cfg, self._params,
        )
        return observe(self._state)


def builtin_target(cm, grid, points, base_cfg, params, seed: int):
    """Seeded hidden-perturbation target around the given stage config.

    Seed 0 applies no perturbation at all (identity target). Other seeds
    scale contact stiffness by [0.7, 1.4], object mass by [0.8, 1.25], add
    velocity-proportional drag, and a constant torque bias.
    """
    if seed == 0:
        return BuiltinTarget(cm, grid, points, base_cfg, params)
    rng = np.random.default_rng(seed)
    kn_scale, kf_scale = rng.uniform(0.7, 1.4, size=2)
    mass_scale = rng.uniform(0.8, 1.25)
    drag_lin = rng.uniform(0.2, 1.0)
    drag_ang = rng.uniform(0.002, 0.01)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    bias = 0.01 * direction

    cp = base_cfg.contact
    cfg = dataclasses.replace(
        base_cfg,
        contact=dataclasses.replace(
            cp, k_n=cp.k_n * kn_scale, k_f=cp.k_f * kf_scale
        ),
    )
    sysp = dataclasses.replace(
        params, object_mass=params.object_mass * mass_scale
    )
    return BuiltinTarget(
        cm, grid, points, cfg, sysp,
        drag_lin=drag_lin, drag_ang=drag_ang, torque_bias=bias,
    )


# ------------------------------------------------------------ replay buffer


class ReplayBuffer:
    """FIFO ring of training windows (start state, controls, observed
    next states), fixed capacity.

    Each window gets a permanent train/held-out tag at entry (every
    holdout-period-th append is held out), so held-out windows are never
    handed to the trainer no matter how the buffer grows or evicts.
    """

    def __init__(self, capacity: int = BUFFER_CAPACITY,
                 holdout_fraction: float = 0.2):
        self.capacity = capacity
        self._period = round(1.0 / holdout_fraction) if holdout_fraction > 0 else 0
        self._entries: collections.deque = collections.deque(maxlen=capacity)
        self._appended = 0

    def append(self, window: residual.RolloutWindow) -> None:
        held = self._period > 0 and self._appended % self._period == self._period - 1
        self._entries.append((window, held))
        self._appended += 1

    def extend(self, windows) -> None:
        for w in windows:
            self.append(w)

    def __len__(self) -> int:
        return len(self._entries)

    def windows(self) -> list:
        return [w for w, _ in self._entries]

    def split(self):
        """(train, heldout) by the permanent per-window tags."""
        train = [w for w, held in self._entries if not held]
        heldout = [w for w, held in self._entries if held]
        return train, heldout


def collect_rollouts(
    target, start: ObservedState, controls: scenemod.ControlTrajectory,
    window_length: int = WINDOW_LENGTH, stride: int = 1,
):
    """Roll the controls through the target and cut overlapping windows.

    States are recorded at frame boundaries; each window carries the
    observed start state, the controls applied over it, and the observed
    states they produced (stored bit-exactly as the target reported them).
    """
    jf = controls.joint_forces
    rv = controls.root_velocities
    T = len(jf)
    L = window_length
    if L < 1 or L > T:
        raise ValueError(f"window length {L} outside 1..{T}")

    target.reset(start)
    obs = [start]
    for n in range(T):
        try:
            obs.append(target.step(jf[n], rv[n]))
        except Exception as e:
            raise RuntimeError(f"target step failed at frame {n}") from e

    windows = []
    for s in range(0, T - L + 1, stride):
        seg = obs[s + 1 : s + L + 1]
        windows.append(residual.RolloutWindow(
            q0=obs[s].q, qd0=obs[s].qd,
            obj_quat0=obs[s].obj_quat, obj_pos0=obs[s].obj_pos,
            obj_linvel0=obs[s].obj_linvel, obj_angvel0=obs[s].obj_angvel,
            joint_forces=jf[s : s + L], root_velocities=rv[s : s + L],
            target_q=jnp.stack([o.q for o in seg]),
            target_obj_quat=jnp.stack([o.obj_quat for o in seg]),
            target_obj_pos=jnp.stack([o.obj_pos for o in seg]),
        ))
    return windows


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: str, rcfg: residual.ResidualConfig,
                    weights: residual.ResidualWeights,
                    controls: scenemod.ControlTrajectory,
                    iteration: int) -> None:
    leaves, _ = jax.tree.flatten(weights)
    data = {f"w{i}": np.asarray(x) for i, x in enumerate(leaves)}
    data["iteration"] = np.asarray(iteration, dtype=np.int64)
    data["enc_widths"] = np.asarray(rcfg.encoder_widths, dtype=np.int64)
    data["head_widths"] = np.asarray(rcfg.head_widths, dtype=np.int64)
    data["ints"] = np.asarray(
        [rcfg.embed_dim, rcfg.n_local, rcfg.n_global, rcfg.max_pairs],
        dtype=np.int64,
    )
    data["floats"] = np.asarray(
        [rcfg.local_range, rcfg.global_range, rcfg.force_cap, rcfg.torque_cap]
    )
    data["jf"] = np.asarray(controls.joint_forces)
    data["rv"] = np.asarray(controls.root_velocities)
    if controls.point_forces is not None:
        data["pf"] = np.asarray(controls.point_forces)
    np.savez(path, **data)


def load_checkpoint(path: str):
    """Returns (rcfg, weights, controls, iteration)."""
    z = np.load(path, allow_pickle=False)
    ints = z["ints"]
    floats = z["floats"]
    rcfg = residual.ResidualConfig(
        encoder_widths=tuple(int(x) for x in z["enc_widths"]),
        head_widths=tuple(int(x) for x in z["head_widths"]),
        embed_dim=int(ints[0]), n_local=int(ints[1]), n_global=int(ints[2]),
        max_pairs=int(ints[3]),
        local_range=float(floats[0]), global_range=float(floats[1]),
        force_cap=float(floats[2]), torque_cap=float(floats[3]),
    )
    template = residual.init_weights(rcfg, 0)
    leaves, treedef = jax.tree.flatten(template)
    weights = jax.tree.unflatten(
        treedef, [jnp.asarray(z[f"w{i}"]) for i in range(len(leaves))]
    )
    controls = scenemod.ControlTrajectory(
        jnp.asarray(z["jf"]), jnp.asarray(z["rv"]),
        jnp.asarray(z["pf"]) if "pf" in z.files else None,
    )
    return rcfg, weights, controls, int(z["iteration"])


# ----------------------------------------------------------- fitting loop


@dataclasses.dataclass
class FitLogRow:
    iteration: int
    train_loss: float  # last training-step loss on the train split
    holdout_loss: float  # window loss on held-out windows, post-update
    f_object: float  # tracking objective of the controls in the target
    f_hand: float
    total: float


def target_tracking(target, start: ObservedState,
                    controls: scenemod.ControlTrajectory,
                    tracking: optim.TrackingObjective, cm):
    """(f_object, f_hand) of a control trajectory executed in the target."""
    target.reset(start)
    seq = [start]
    for n in range(len(controls.joint_forces)):
        seq.append(target.step(controls.joint_forces[n],
                               controls.root_velocities[n]))
    kp = jnp.stack([kinematics.keypoint_positions(cm, o.q) for o in seq])
    quats = jnp.stack([o.obj_quat for o in seq])
    pos = jnp.stack([o.obj_pos for o in seq])
    f_obj, f_hand = optim.objective_parts(kp, quats, pos, tracking)
    return float(f_obj), float(f_hand)


def fit_and_refine(
    target, cm, grid, points, rcfg: residual.ResidualConfig, surface,
    tracking: optim.TrackingObjective,
    controls: scenemod.ControlTrajectory,
    cfg, sysp, start: ObservedState,
    *,
    weights: residual.ResidualWeights | None = None,
    iterations: int = 8,
    fit_steps: int = 256,
    refine_steps: int = 256,
    fit_lr: float = 5e-4,
    refine_lr: float = 5e-4,
    window_length: int = WINDOW_LENGTH,
    stride: int = 1,
    batch_size: int = 4,
    holdout_fraction: float = 0.2,
    holdout_sample: int = 16,
    train_sample: int | None = None,
    buffer: ReplayBuffer | None = None,
    max_iterations: int = DESK_ITERATION_CAP,
    checkpoint_path: str | None = None,
    checkpoint_every: int = 100,
    seed: int = 0,
):
    """Alternate target sampling, residual fitting, and control refinement.

    Each iteration: collect windows from the target under the current
    controls, train the residual on the buffer's train split, refine the
    controls inside the fitted quasi-sim, and log the target-environment
    tracking objective. Returns (weights, controls, buffer, log rows).
    """
    iterations = min(int(iterations), int(max_iterations))
    if weights is None:
        weights = residual.init_weights(rcfg, seed)
    if buffer is None:
        buffer = ReplayBuffer(holdout_fraction=holdout_fraction)
    fit = residual.make_trainer(cm, grid, points, rcfg, surface)
    state0 = as_sim_state(start, points.count)
    n_frames = len(controls.joint_forces)

    def refine_loss(ctrl, wts):
        fn = residual.make_residual_fn(cm, grid, points, rcfg, surface, wts)
        trace, _ = simulator.rollout(cm, grid, points, cfg, sysp, state0, ctrl, fn)
        f_obj, f_hand = optim.objective_parts(
            trace.keypoints, trace.obj_quat, trace.obj_pos, tracking
        )
        return tracking.w_object * f_obj + tracking.w_hand * f_hand

    refine_vg = jax.jit(jax.value_and_grad(refine_loss, argnums=0))

    def holdout_loss_fn(wts, stacked):
        per = jax.vmap(
            lambda w: residual.window_loss(
                cm, grid, points, rcfg, surface, cfg, sysp, wts, w
            )
        )(stacked)
        return jnp.mean(per)

    holdout_eval = jax.jit(holdout_loss_fn)

    logs: list[FitLogRow] = []
    for it in range(iterations):
        buffer.extend(collect_rollouts(
            target, start, controls, window_length=window_length, stride=stride
        ))
        train, heldout = buffer.split()
        if not train:
            raise RuntimeError("replay buffer has no training windows")
        if train_sample is not None:
            # fixed-size draw keeps the trainer's compiled shapes constant
            rng = np.random.default_rng(seed * 104729 + it)
            train = [train[i] for i in rng.integers(0, len(train), size=train_sample)]
        weights, losses = fit(
            weights, train, fit_steps, fit_lr,
            cfg=cfg, sysp=sysp, batch_size=batch_size, seed=seed + it,
        )
        train_loss = float(losses[-1]) if len(losses) else float("nan")

        if heldout:
            # fixed-size subsample keeps one compiled evaluation shape
            rng = np.random.default_rng(seed * 7919 + it)
            idx = rng.integers(0, len(heldout), size=holdout_sample)
            sample = residual.stack_windows([heldout[i] for i in idx])
            hold = float(holdout_eval(weights, sample))
        else:
            hold = float("nan")

        controls, _ = optim.optimize_controls(
            None, controls, steps=refine_steps, lr=refine_lr,
            value_and_grad=lambda c: refine_vg(c, weights),
        )

        f_obj, f_hand = target_tracking(target, start, controls, tracking, cm)
        logs.append(FitLogRow(
            iteration=it + 1, train_loss=train_loss, holdout_loss=hold,
            f_object=f_obj, f_hand=f_hand,
            total=tracking.w_object * f_obj + tracking.w_hand * f_hand,
        ))
        if checkpoint_path is not None and (it + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, rcfg, weights, controls, it + 1)

    return weights, controls, buffer, logs


# -------------------------------------------------------------------- MPC


@dataclasses.dataclass
class MpcResult:
    q: np.ndarray  # (F+1, n) executed joint trajectory (frame 0 = start)
    obj_quat: np.ndarray  # (F+1, 4)
    obj_pos: np.ndarray  # (F+1, 3)
    f_object: float
    f_hand: float
    aborted_at: int | None  # frame index of a target failure, None if clean


def _pad_tail(arr, extra):
    if extra == 0:
        return jnp.asarray(arr)
    tail = jnp.repeat(jnp.asarray(arr)[-1:], extra, axis=0)
    return jnp.concatenate([jnp.asarray(arr), tail], axis=0)


def mpc_execute(
    target, cm, grid, points, rcfg: residual.ResidualConfig, surface,
    weights: residual.ResidualWeights,
    controls: scenemod.ControlTrajectory,
    tracking: optim.TrackingObjective,
    cfg, sysp, start: ObservedState,
    *,
    horizon: int = WINDOW_LENGTH,
    inner_steps: int = 10,
    lr: float = 1e-4,
):
    """Closed-loop tracking: at each frame, re-plan a window of controls in
    the fitted quasi-sim from the observed target state, apply the first
    frame, advance the target, re-sync by assignment.

    Inner updates are monotone-accept, so a window that cannot be improved
    is applied unchanged. A target failure aborts with the partial
    trajectory and the frame index. Returns MpcResult.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    T = len(controls.joint_forces)
    pad = horizon - 1
    jf = _pad_tail(controls.joint_forces, pad)
    rv = _pad_tail(controls.root_velocities, pad)
    kp_ref = _pad_tail(tracking.keypoints, pad)
    quat_ref = _pad_tail(tracking.object_quat, pad)
    pos_ref = _pad_tail(tracking.object_pos, pad)

    def window_objective(w_jf, w_rv, state0, kp_t, quat_t, pos_t):
        ctrl = scenemod.ControlTrajectory(w_jf, w_rv, None)
        fn = residual.make_residual_fn(cm, grid, points, rcfg, surface, weights)
        trace, _ = simulator.rollout(
            cm, grid, points, cfg, sysp, state0, ctrl, fn
        )
        sub = optim.TrackingObjective(
            keypoints=kp_t, object_quat=quat_t, object_pos=pos_t,
            w_object=tracking.w_object, w_hand=tracking.w_hand,
        )
        f_obj, f_hand = optim.objective_parts(
            trace.keypoints[1:], trace.obj_quat[1:], trace.obj_pos[1:], sub
        )
        return tracking.w_object * f_obj + tracking.w_hand * f_hand

    window_vg = jax.jit(jax.value_and_grad(window_objective, argnums=(0, 1)))

    target.reset(start)
    obs = start
    executed = [start]
    aborted_at = None
    for n in range(T):
        state_n = as_sim_state(obs, points.count)
        w_jf = jf[n : n + horizon]
        w_rv = rv[n : n + horizon]
        kp_t = kp_ref[n + 1 : n + 1 + horizon]
        quat_t = quat_ref[n + 1 : n + 1 + horizon]
        pos_t = pos_ref[n + 1 : n + 1 + horizon]

        best = (w_jf, w_rv)
        best_loss = np.inf
        cur = best
        opt = adam.init(cur)
        for _ in range(inner_steps):
            loss, grads = window_vg(cur[0], cur[1], state_n, kp_t, quat_t, pos_t)
            loss = float(loss)
            if not np.isfinite(loss):
                break
            if loss < best_loss:
                best, best_loss = cur, loss
            opt, cur = adam.update(opt, grads, cur, lr)

        jf = jf.at[n : n + horizon].set(best[0])
        rv = rv.at[n : n + horizon].set(best[1])
        try:
            obs = target.step(jf[n], rv[n])
        except Exception:
            aborted_at = n
            break
        executed.append(obs)

    kp = jnp.stack([kinematics.keypoint_positions(cm, o.q) for o in executed])
    quats = jnp.stack([o.obj_quat for o in executed])
    pos = jnp.stack([o.obj_pos for o in executed])
    F = len(executed)
    sub = optim.TrackingObjective(
        keypoints=tracking.keypoints[:F], object_quat=tracking.object_quat[:F],
        object_pos=tracking.object_pos[:F],
        w_object=tracking.w_object, w_hand=tracking.w_hand,
    )
    f_obj, f_hand = optim.objective_parts(kp, quats, pos, sub)
    return MpcResult(
        q=np.asarray(jnp.stack([o.q for o in executed])),
        obj_quat=np.asarray(quats), obj_pos=np.asarray(pos),
        f_object=float(f_obj), f_hand=float(f_hand), aborted_at=aborted_at,
    )
