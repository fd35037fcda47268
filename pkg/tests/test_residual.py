"""Residual network tests: encoders, region sampling, checkpoints, training."""

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np
import pytest

import microscenes
from qpsim import contact as contactmod
from qpsim import mesh as meshmod
from qpsim import residual, scene, simulator

TINY = residual.ResidualConfig(
    encoder_widths=(8, 12), head_widths=(8,), embed_dim=4,
    n_local=8, n_global=12, max_pairs=2,
)


def random_features(rng, count=10):
    return residual.ContactRegionFeatures(
        positions=jnp.asarray(rng.normal(0, 0.02, (count, 3))),
        velocities=jnp.asarray(rng.normal(0, 0.1, (count, 3))),
        normals=jnp.asarray(rng.normal(0, 1.0, (count, 3))),
        ptype=jnp.asarray(rng.integers(0, 2, count), dtype=jnp.int32),
    )


def random_weights(rng, cfg=TINY):
    base = residual.init_weights(cfg, seed=int(rng.integers(1 << 30)))

    def fill(group):
        return tuple(
            (jnp.asarray(rng.normal(0, 0.3, w.shape)), jnp.asarray(rng.normal(0, 0.3, b.shape)))
            for w, b in group
        )

    return dataclasses.replace(
        base, local_head=fill(base.local_head), global_head=fill(base.global_head)
    )


def test_default_config_matches_published_sizes():
    cfg = residual.ResidualConfig()
    assert cfg.encoder_widths == (128, 256, 512, 1024)
    assert cfg.head_widths == (512, 256, 128)
    assert cfg.embed_dim == 128
    assert cfg.n_local == 100
    assert cfg.n_global == 500
    assert cfg.local_range == 0.05
    assert cfg.global_range == 0.1


def test_permuting_region_points_leaves_outputs_unchanged(rng):
    feats = random_features(rng, 14)
    w = random_weights(rng)
    perm = rng.permutation(14)
    shuffled = residual.ContactRegionFeatures(
        positions=feats.positions[perm], velocities=feats.velocities[perm],
        normals=feats.normals[perm], ptype=feats.ptype[perm],
    )
    for mode in ("local", "global"):
        a = jnp.concatenate(residual.predict_residual(feats, w, mode))
        b = jnp.concatenate(residual.predict_residual(shuffled, w, mode))
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), atol=1e-9)


def test_zero_initialized_heads_produce_zero_residuals(rng):
    w = residual.init_weights(TINY, seed=5)
    feats = random_features(rng)
    for mode in ("local", "global"):
        out = residual.predict_residual(feats, w, mode)
        assert all(bool(jnp.all(part == 0.0)) for part in out)


def test_unknown_mode_is_rejected(rng):
    with pytest.raises(ValueError, match="mode"):
        residual.predict_residual(random_features(rng), random_weights(rng), "both")


def test_head_weight_gradients_match_finite_differences(rng):
    feats = random_features(rng, 12)
    w = random_weights(rng)
    mix = jnp.asarray(rng.normal(size=6))

    def loss_from_w(W_final):
        head = w.local_head[:-1] + ((W_final, w.local_head[-1][1]),)
        wts = dataclasses.replace(w, local_head=head)
        fc, ff = residual.predict_residual(feats, wts, "local")
        return jnp.sum(mix * jnp.concatenate([fc, ff]))

    W0 = w.local_head[-1][0]
    g = np.asarray(jax.grad(loss_from_w)(W0))

    h = 1e-5
    flat = np.asarray(W0).ravel()
    picks = rng.choice(flat.size, size=min(24, flat.size), replace=False)
    for k in picks:
        e = np.zeros_like(flat)
        e[k] = h
        d = jnp.asarray(e.reshape(W0.shape))
        fd = (float(loss_from_w(W0 + d)) - float(loss_from_w(W0 - d))) / (2 * h)
        assert abs(g.ravel()[k] - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_output_magnitudes_respect_caps(rng):
    w = random_weights(rng)
    huge = jax.tree.map(lambda x: x * 1e6, w)
    feats = random_features(rng)
    fc, ff = residual.predict_residual(feats, huge, "local")
    F, T = residual.predict_residual(feats, huge, "global")
    assert float(jnp.max(jnp.abs(jnp.concatenate([fc, ff, F])))) <= 10.0
    assert float(jnp.max(jnp.abs(T))) <= 1.0


# ------------------------------------------------------------- region sampling


def test_farthest_point_sampling_is_deterministic(rng):
    pts = jnp.asarray(rng.normal(size=(40, 3)))
    mask = jnp.asarray(rng.random(40) < 0.8)
    a = residual.farthest_point_indices(pts, mask, 12, seed=3)
    b = residual.farthest_point_indices(pts, mask, 12, seed=3)
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_sampling_exact_candidate_count_returns_all(rng):
    pts = jnp.asarray(rng.normal(size=(9, 3)))
    idx = residual.farthest_point_indices(pts, jnp.ones(9, dtype=bool), 9, seed=4)
    assert sorted(np.asarray(idx).tolist()) == list(range(9))


def test_sampling_with_fewer_candidates_repeats_them(rng):
    pts = jnp.asarray(rng.normal(size=(8, 3)))
    mask = jnp.zeros(8, dtype=bool).at[jnp.array([1, 4, 6])].set(True)
    idx = np.asarray(residual.farthest_point_indices(pts, mask, 7, seed=0))
    assert set(idx.tolist()) == {1, 4, 6}  # only eligible rows, reused


def test_local_region_is_a_chord_distance_cap_on_a_sphere(rng):
    # candidates on a 0.1 m sphere; only the polar cap within 0.05 m chord
    # distance of the contact point may be selected
    sphere = meshmod.make_icosphere(0.1, subdivisions=3)
    pts, normals = meshmod.sample_surface(sphere, 400, rng)
    anchor = jnp.array([0.0, 0.0, 0.1])
    feats = residual.extract_region(
        anchor,
        jnp.zeros((1, 3)) + 5.0,  # hand point far away: excluded
        jnp.zeros((1, 3)),
        jnp.asarray(pts), jnp.zeros((400, 3)), jnp.asarray(normals),
        n_per_side=16, max_distance=0.05,
    )
    in_cap = np.linalg.norm(pts - np.asarray(anchor), axis=1) <= 0.05
    assert in_cap.sum() >= 16  # sanity: the cap has enough candidates

    obj_rows = np.asarray(feats.positions[16:])
    dists = np.linalg.norm(obj_rows, axis=1)
    assert np.all(dists <= 0.05 + 1e-12)
    # every selected point is one of the brute-force cap members
    cap_rel = pts[in_cap] - np.asarray(anchor)
    for row in obj_rows:
        assert np.min(np.linalg.norm(cap_rel - row, axis=1)) < 1e-12
    # hand side had no candidates in range: rows zeroed
    np.testing.assert_array_equal(np.asarray(feats.positions[:16]), 0.0)


def test_region_keeps_the_contact_point_itself(rng):
    pts = jnp.asarray(rng.normal(0, 0.01, (30, 3)))
    anchor = jnp.array([0.004, -0.002, 0.001])
    cands = jnp.concatenate([anchor[None], pts])
    feats = residual.extract_region(
        anchor, pts * 100.0, jnp.zeros((30, 3)),
        cands, jnp.zeros((31, 3)), jnp.zeros((31, 3)),
        n_per_side=6, max_distance=0.05,
    )
    # seed 0 starts the object-side walk at the first in-range candidate,
    # which is the contact point itself (relative position zero)
    np.testing.assert_array_equal(np.asarray(feats.positions[6]), 0.0)


# ----------------------------------------------------------------- sim hook


@pytest.fixture(scope="module")
def gripper():
    cm, grid, points, params, info = microscenes.gripper_stick_scene()
    surface = residual.object_surface_points(info["obj"], 48, seed=0)
    return cm, grid, points, params, info, surface


def settle_grasp(cm, grid, points, params, info, cfg, squeeze=2.0, frames=60):
    tt = info["touch_travel"]
    q0 = jnp.zeros(cm.n_dof).at[6].set(tt - 0.0195).at[7].set(-(tt - 0.0195))
    state0 = simulator.make_state(cm, points, cfg, q=q0)
    jf1 = jnp.zeros(cm.n_dof).at[6].set(squeeze).at[7].set(-squeeze)
    run = simulator.make_rollout_fn(cm, grid, points)
    ctrl = scene.ControlTrajectory(jnp.tile(jf1[None], (frames, 1)), jnp.zeros((frames, 6)))
    _, settled = run(cfg, params, state0, ctrl)
    assert bool(jnp.all(settled.pairs.active))
    return settled, jf1


def test_zero_weights_leave_rollout_bit_identical(gripper):
    cm, grid, points, params, info, surface = gripper
    cp = contactmod.make_contact_params(d_c=0.02, k_n=1e3, k_d=10.0, k_f=1e3)
    cfg = simulator.make_config(cp, alpha=0.0, dt=2e-4, substeps=3)
    settled, jf1 = settle_grasp(cm, grid, points, params, info, cfg)
    controls = scene.ControlTrajectory(jnp.tile(jf1[None], (5, 1)), jnp.zeros((5, 6)))

    w0 = residual.init_weights(TINY, seed=0)
    fn = residual.make_residual_fn(cm, grid, points, TINY, surface, w0)
    tr_plain, _ = simulator.rollout(cm, grid, points, cfg, params, settled, controls)
    tr_hook, _ = simulator.rollout(cm, grid, points, cfg, params, settled, controls, fn)
    for a, b in zip(jax.tree.leaves(tr_plain), jax.tree.leaves(tr_hook)):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_wrench_reaches_hand_only_through_contacts(gripper, rng):
    cm, grid, points, params, info, surface = gripper
    cp = contactmod.make_contact_params(d_c=0.02, k_n=1e3, k_d=10.0, k_f=1e3)
    cfg = simulator.make_config(cp, alpha=0.0)
    w = random_weights(rng)

    open_state = simulator.make_state(cm, points, cfg)  # jaws apart, no pairs
    gen, force, torque = residual.residual_wrench(
        cm, grid, points, TINY, surface, w, open_state
    )
    np.testing.assert_array_equal(np.asarray(gen), 0.0)
    assert np.all(np.isfinite(np.asarray(force)))
    assert np.all(np.isfinite(np.asarray(torque)))

    settled, _ = settle_grasp(cm, grid, points, params, info, cfg)
    gen_c, _, _ = residual.residual_wrench(cm, grid, points, TINY, surface, w, settled)
    assert float(jnp.max(jnp.abs(gen_c))) > 0.0


def test_checkpoint_roundtrip_preserves_weights_and_config(tmp_path, rng):
    w = random_weights(rng)
    path = str(tmp_path / "net.qres")
    residual.save_weights(path, TINY, w)
    cfg2, w2 = residual.load_weights(path)
    assert cfg2 == TINY
    for a, b in zip(jax.tree.leaves(w), jax.tree.leaves(w2)):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))

    bad = tmp_path / "other.bin"
    bad.write_bytes(b"QSDFnope")
    with pytest.raises(ValueError, match="magic"):
        residual.load_weights(str(bad))


# ----------------------------------------------------------------- training


@pytest.fixture(scope="module")
def trainer(gripper):
    cm, grid, points, params, info, surface = gripper
    return residual.make_trainer(cm, grid, points, TINY, surface)


def make_window(cm, grid, points, params, cfg_target, cfg_model, state0, jf1, frames):
    """Window whose targets come from a rollout under cfg_target physics.

    The target rollout starts from cleared contact pairs, matching how window
    replay re-detects contacts (pair anchoring is unobservable state)."""
    state0 = dataclasses.replace(state0, pairs=contactmod.empty_pairs(points.count))
    jf = jnp.tile(jf1[None], (frames, 1))
    rv = jnp.zeros((frames, 6))
    run = simulator.make_rollout_fn(cm, grid, points)
    tr, _ = run(cfg_target, params, state0, scene.ControlTrajectory(jf, rv))
    return residual.RolloutWindow(
        q0=state0.q, qd0=state0.qd, obj_quat0=state0.obj_quat, obj_pos0=state0.obj_pos,
        obj_linvel0=state0.obj_linvel, obj_angvel0=state0.obj_angvel,
        joint_forces=jf, root_velocities=rv,
        target_q=tr.q[1:], target_obj_quat=tr.obj_quat[1:], target_obj_pos=tr.obj_pos[1:],
    )


def mean_residual_force(cm, grid, points, params, cfg, rcfg, surface, w, state, jf1, frames):
    fn = residual.make_residual_fn(cm, grid, points, rcfg, surface, w)
    step = jax.jit(
        lambda s, e: simulator.frame_step(
            cm, grid, points, cfg, params, s, jf1, jnp.zeros(6), None, e
        )
    )
    mags = []
    for _ in range(frames):
        extra = fn(state)
        mags.append(float(jnp.linalg.norm(extra[1])))
        state = step(state, extra)
    return float(np.mean(mags))


def test_training_memorizes_a_single_transition(gripper, trainer):
    cm, grid, points, params, info, surface = gripper
    cp = contactmod.make_contact_params(d_c=0.02, k_n=1e3, k_d=10.0, k_f=1e3)
    cfg = simulator.make_config(cp, alpha=0.0, dt=2e-4, substeps=3)
    # target physics differ by a constant object force (gravity offset), which
    # the network can represent exactly, so the fit can go arbitrarily deep
    cfg_t = dataclasses.replace(cfg, gravity=jnp.array([0.0, 0.0, -11.81]))
    settled, jf1 = settle_grasp(cm, grid, points, params, info, cfg)
    win = make_window(cm, grid, points, params, cfg_t, cfg, settled, jf1, 2)

    w0 = residual.init_weights(TINY, seed=0)
    _, losses = trainer(w0, [win], 5000, 1e-3, cfg=cfg, sysp=params, batch_size=1)
    la = np.asarray(losses)
    assert la[0] > 0.0
    assert la.min() < 1e-6 * la[0]


def test_training_on_self_target_keeps_residual_forces_small(gripper, trainer):
    cm, grid, points, params, info, surface = gripper
    cp = contactmod.make_contact_params(d_c=0.02, k_n=1e3, k_d=10.0, k_f=1e3)
    cfg = simulator.make_config(cp, alpha=0.0, dt=2e-3, substeps=4)
    settled, jf1 = settle_grasp(cm, grid, points, params, info, cfg, frames=50)
    win = make_window(cm, grid, points, params, cfg, cfg, settled, jf1, 8)

    # zero gap, standard init: training must not invent forces
    w0 = residual.init_weights(TINY, seed=0)
    w_trained, _ = trainer(w0, [win], 2000, 1e-4, cfg=cfg, sysp=params, batch_size=1)
    f_mean = mean_residual_force(
        cm, grid, points, params, cfg, TINY, surface, w_trained, settled, jf1, 8
    )
    assert f_mean < 0.1

    # a deliberately corrupted head must at least train back toward the target
    r = np.random.default_rng(7)

    def bump(head):
        W, b = head[-1]
        return head[:-1] + (
            (W + jnp.asarray(r.normal(0, 0.05, W.shape)),
             b + jnp.asarray(r.normal(0, 0.05, b.shape))),
        )

    w_bad = dataclasses.replace(
        w0, local_head=bump(w0.local_head), global_head=bump(w0.global_head)
    )
    _, losses = trainer(w_bad, [win], 2000, 1e-4, cfg=cfg, sysp=params, batch_size=1)
    assert float(losses[-1]) < 0.5 * float(losses[0])


def test_training_validates_inputs(gripper, trainer):
    cm, grid, points, params, info, surface = gripper
    cp = contactmod.make_contact_params(d_c=0.02, k_n=1e3, k_d=10.0, k_f=1e3)
    cfg = simulator.make_config(cp, alpha=0.0, dt=2e-4, substeps=3)
    w0 = residual.init_weights(TINY, seed=0)

    with pytest.raises(ValueError, match="empty"):
        trainer(w0, [], 10, 1e-4, cfg=cfg, sysp=params)

    settled, jf1 = settle_grasp(cm, grid, points, params, info, cfg)
    win = make_window(cm, grid, points, params, cfg, cfg, settled, jf1, 2)
    cfg_pts = simulator.make_config(cp, alpha=0.1, dt=2e-4, substeps=3)
    with pytest.raises(ValueError, match="point"):
        trainer(w0, [win], 10, 1e-4, cfg=cfg_pts, sysp=params)

    w_same, losses = trainer(w0, [win], 0, 1e-4, cfg=cfg, sysp=params)
    assert losses.shape == (0,)
    for a, b in zip(jax.tree.leaves(w0), jax.tree.leaves(w_same)):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))
