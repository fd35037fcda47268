import jax.numpy as jnp
import numpy as np
import pytest

from qpsim import contact, mesh, sdf

# Box object, half extent 0.03. Near a face center the grid is exact (the
# distance field is linear there), so force arithmetic can be audited tightly.
HALF = 0.03


@pytest.fixture(scope="module")
def rig():
    grid = sdf.build_sdf_grid(mesh.make_box([HALF, HALF, HALF]), resolution=32)
    params = contact.make_contact_params(d_c=0.01, k_n=4e5, k_d=1e3, k_f=1e6)
    return grid, params


def _single_pair(p_world, active=True):
    pairs = contact.empty_pairs(1)
    return contact.PairState(
        active=jnp.array([active]),
        anchor=jnp.array([[0.0, 0.0, HALF]]),
        normal=jnp.array([[0.0, 0.0, 1.0]]),
        mode=pairs.mode,
    )


def _forces(rig, pairs, p, v, obj_v=(0, 0, 0), obj_w=(0, 0, 0)):
    grid, params = rig
    return contact.pair_forces(
        pairs,
        grid,
        jnp.asarray([p], dtype=jnp.float64),
        jnp.asarray([v], dtype=jnp.float64),
        jnp.array([1.0, 0.0, 0.0, 0.0]),
        jnp.zeros(3),
        jnp.asarray(obj_v, dtype=jnp.float64),
        jnp.asarray(obj_w, dtype=jnp.float64),
        params,
    )


def test_normal_force_spring_only():
    # depth 6 mm at rest: 4e5 * 0.006 = 2400 N
    mag = contact.contact_force_magnitude(
        0.006, 0.0, contact.make_contact_params(0.01, 4e5, 1e3, 1e6)
    )
    assert abs(float(mag) - 2400.0) < 1e-9


def test_normal_force_zero_at_range_boundary():
    mag = contact.contact_force_magnitude(
        0.0, 0.0, contact.make_contact_params(0.01, 4e5, 1e3, 1e6)
    )
    assert float(mag) == 0.0


def test_normal_force_damping_resists_approach():
    # closing at 0.1 m/s adds k_d*d*0.1 = 1 N on top of the 4000 N spring
    mag = contact.contact_force_magnitude(
        0.01, -0.1, contact.make_contact_params(0.02, 4e5, 1e3, 1e6)
    )
    assert abs(float(mag) - 4001.0) < 1e-9


def test_normal_force_never_adhesive():
    # separating fast enough to exhaust the spring: clamped at zero
    mag = contact.contact_force_magnitude(
        0.01, 1e4, contact.make_contact_params(0.02, 4e5, 1e3, 1e6)
    )
    assert float(mag) == 0.0


def test_normal_force_monotone_in_depth_and_stiffness():
    cp = contact.make_contact_params(0.02, 4e5, 1e3, 1e6)
    depths = jnp.linspace(1e-4, 0.02, 32)
    mags = np.asarray(contact.contact_force_magnitude(depths, 0.0, cp))
    assert np.all(np.diff(mags) > 0)
    ks = jnp.linspace(4e4, 4e6, 16)
    mags_k = np.array(
        [
            float(contact.contact_force_magnitude(0.005, 0.0,
                                                  contact.make_contact_params(0.02, k, 1e3, 1e6)))
            for k in ks
        ]
    )
    assert np.all(np.diff(mags_k) > 0)


def test_normal_force_continuous_at_zero_depth():
    cp = contact.make_contact_params(0.0, 4e6, 1e3, 1e7)
    assert float(contact.contact_force_magnitude(1e-9, 0.0, cp)) < 0.01


def test_pair_force_direction_on_object(rig):
    pairs = _single_pair(None)
    f_n, f_f, _ = _forces(rig, pairs, [0.0, 0.0, HALF + 0.004], [0.0, 0.0, 0.0])
    f = np.asarray(f_n[0])
    # spring pushes the object away from the point: straight down here
    assert abs(f[2] - (-2400.0)) < 1.0
    assert abs(f[0]) < 1e-9 and abs(f[1]) < 1e-9
    assert np.allclose(np.asarray(f_f[0]), 0.0, atol=1e-9)


def test_static_friction_zero_for_normal_displacement(rig):
    pairs = _single_pair(None)
    # point directly above the anchor: displacement is purely normal
    f_n, f_f, after = _forces(rig, pairs, [0.0, 0.0, HALF + 0.002], [0.0, 0.0, 0.0])
    assert np.allclose(np.asarray(f_f[0]), 0.0, atol=1e-9)
    assert bool(after.active[0])


def test_static_friction_drags_object_along_slip(rig):
    pairs = _single_pair(None)
    # 0.1 mm of tangential slip, deep contact so the stick bound holds
    f_n, f_f, after = _forces(rig, pairs, [1e-4, 0.0, HALF + 0.001], [0.0, 0.0, 0.0])
    f = np.asarray(f_f[0])
    assert abs(f[0] - 1e6 * 1e-4) < 1e-6
    assert bool(after.active[0])
    assert int(after.mode[0]) == 0


def test_friction_bound_break_and_dynamic_force(rig):
    # mag = 50 N (depth 1.25e-4), bound mu*mag = 500 N; 1 mm slip gives a
    # 1000 N static force -> dynamic branch fires at mu*1000 and the pair breaks
    depth = 50.0 / 4e5
    pairs = _single_pair(None)
    f_n, f_f, after = _forces(
        rig, pairs, [1e-3, 0.0, HALF + 0.01 - depth], [0.2, 0.0, 0.0]
    )
    f = np.asarray(f_f[0])
    assert abs(f[0] - 10.0 * 1000.0) < 0.5  # grid sd error shifts the bound a hair
    assert abs(f[1]) < 1e-9
    assert not bool(after.active[0])
    assert int(after.mode[0]) == 1


def test_dynamic_friction_singularity_guard(rig):
    # over the static bound but zero tangential velocity: no tangential force
    depth = 50.0 / 4e5
    pairs = _single_pair(None)
    _, f_f, after = _forces(rig, pairs, [1e-3, 0.0, HALF + 0.01 - depth], [0.0, 0.0, 0.0])
    assert np.allclose(np.asarray(f_f[0]), 0.0, atol=1e-12)
    assert not bool(after.active[0])


def test_detect_no_points_in_range(rig):
    grid, params = rig
    pairs = contact.empty_pairs(3)
    p = jnp.array([[0.0, 0.0, 0.2], [0.1, 0.1, 0.1], [0.0, 0.0, -0.5]])
    out = contact.detect_contacts(
        pairs, grid, p, jnp.array([1.0, 0.0, 0.0, 0.0]), jnp.zeros(3), params.d_c
    )
    assert not bool(jnp.any(out.active))


def test_detect_single_point_in_range(rig):
    grid, params = rig
    pairs = contact.empty_pairs(2)
    p = jnp.array([[0.0, 0.0, HALF + 0.005], [0.0, 0.0, 0.2]])  # sd = d_c/2 and far
    out = contact.detect_contacts(
        pairs, grid, p, jnp.array([1.0, 0.0, 0.0, 0.0]), jnp.zeros(3), params.d_c
    )
    assert bool(out.active[0]) and not bool(out.active[1])
    np.testing.assert_allclose(np.asarray(out.normal[0]), [0, 0, 1], atol=1e-6)
    np.testing.assert_allclose(np.asarray(out.anchor[0]), [0, 0, HALF], atol=1e-6)


def test_pair_persists_through_retreat_without_slip(rig):
    grid, params = rig
    pairs = contact.empty_pairs(1)
    ident = jnp.array([1.0, 0.0, 0.0, 0.0])
    # enter
    p1 = jnp.array([[0.0, 0.0, HALF + 0.005]])
    pairs = contact.detect_contacts(pairs, grid, p1, ident, jnp.zeros(3), params.d_c)
    assert bool(pairs.active[0])
    # retreat to 1.5 * d_c without tangential motion: force-free but alive
    p2 = jnp.array([[0.0, 0.0, HALF + 0.015]])
    f_n, f_f, pairs = contact.pair_forces(
        pairs, grid, p2, jnp.zeros((1, 3)), ident, jnp.zeros(3), jnp.zeros(3), jnp.zeros(3),
        params,
    )
    assert np.allclose(np.asarray(f_n), 0.0, atol=1e-12)
    assert np.allclose(np.asarray(f_f), 0.0, atol=1e-12)
    assert bool(pairs.active[0])
    # retreat beyond 2 * d_c: retired
    p3 = jnp.array([[0.0, 0.0, HALF + 0.025]])
    _, _, pairs = contact.pair_forces(
        pairs, grid, p3, jnp.zeros((1, 3)), ident, jnp.zeros(3), jnp.zeros(3), jnp.zeros(3),
        params,
    )
    assert not bool(pairs.active[0])


def test_accumulate_empty_is_zero():
    P, n = 4, 7
    gen, force, torque, pf = contact.accumulate_wrenches(
        jnp.zeros((P, 3)), jnp.zeros((P, 3)), jnp.zeros((P, 3)), jnp.zeros(3),
        jnp.ones((P, 3, n)), 0.1,
    )
    assert np.allclose(np.asarray(gen), 0.0)
    assert np.allclose(np.asarray(force), 0.0)
    assert np.allclose(np.asarray(torque), 0.0)
    assert np.allclose(np.asarray(pf), 0.0)


def test_accumulate_single_pair_reaction(rng):
    n = 5
    J = jnp.asarray(rng.normal(size=(1, 3, n)))
    f = jnp.asarray(rng.normal(size=(1, 3)))
    alpha = 0.1
    gen, force, torque, pf = contact.accumulate_wrenches(
        f, jnp.zeros((1, 3)), jnp.array([[0.0, 0.1, 0.0]]), jnp.zeros(3), J, alpha
    )
    want = (1 - alpha) * np.asarray(J[0]).T @ (-np.asarray(f[0]))
    np.testing.assert_allclose(np.asarray(gen), want, atol=1e-12)
    np.testing.assert_allclose(np.asarray(pf[0]), -alpha * np.asarray(f[0]), atol=1e-12)


def test_accumulate_newton_third_law(rng):
    P, n = 6, 9
    f_n = jnp.asarray(rng.normal(size=(P, 3)))
    f_f = jnp.asarray(rng.normal(size=(P, 3)))
    anchors = jnp.asarray(rng.normal(size=(P, 3)) * 0.05)
    gen, force, torque, pf = contact.accumulate_wrenches(
        f_n, f_f, anchors, jnp.zeros(3), jnp.asarray(rng.normal(size=(P, 3, n))), 1.0
    )
    # with the whole reaction on the points, forces cancel exactly
    total = np.asarray(force) + np.asarray(pf).sum(axis=0)
    np.testing.assert_allclose(total, 0.0, atol=1e-10)
