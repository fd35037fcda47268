"""Small purpose-built scenes shared by simulator and acceptance tests."""

import jax.numpy as jnp
import numpy as np

from qpsim import kinematics, scene, simulator


def _box_link(name, mass, half, parent, joint):
    shape = scene.Shape("box", half)
    return scene.LinkSpec(name, mass, shape.solid_inertia(mass), shape, parent,
                          np.zeros(3)), joint


def slab_rest_scene():
    """A heavy static slab with four contact points on its top face, plus a
    0.1 kg box that can rest on them. Returns (cm, grid, points, params, z_top,
    box_half) with the slab top at z = z_top."""
    slab_half = (0.06, 0.06, 0.01)
    link, joint = _box_link("slab", 50.0, slab_half, -1,
                            scene.JointSpec(scene.FREE, np.zeros(3), np.zeros(3)))
    model = scene.ArticulatedModel((link,), (joint,), ())
    scene.validate_model(model)
    cm = kinematics.compile_model(model)

    box_half = 0.02
    obj = scene.ObjectSpec(scene.Shape("box", (box_half,) * 3), sdf_resolution=32)
    grid = obj.build_grid()
    params = scene.make_system_params(
        0.1, obj.shape.solid_inertia(0.1), lin_damping=0.0, ang_damping=0.0
    )

    # support points must fall well inside the 2 cm box footprint, away from
    # the edge region where the interpolated distance field loses linearity
    corners = np.array(
        [[sx * 0.012, sy * 0.012, slab_half[2]] for sx in (-1, 1) for sy in (-1, 1)]
    )
    points = simulator.PointSet(
        body=np.zeros(4, dtype=np.int64),
        local=jnp.asarray(corners),
        mass=jnp.full(4, link.mass / 4),
        alpha=0.0,
    )
    return cm, grid, points, params, slab_half[2], box_half


def gripper_stick_scene():
    """A two-jaw gripper squeezing a 0.1 kg box along y; gravity pulls the box
    down and only friction holds it. Returns (cm, grid, points, params, info)
    where info has jaw dof indices, squeeze sign per jaw, and the jaw travel
    that just touches the box faces."""
    palm, palm_joint = _box_link("palm", 10.0, (0.02, 0.02, 0.02), -1,
                                 scene.JointSpec(scene.FREE, np.zeros(3), np.zeros(3)))
    jaw_half = (0.012, 0.005, 0.02)
    jaw_damping = 50.0
    jaw1, j1 = _box_link(
        "jaw_neg_y", 0.5, jaw_half, 0,
        scene.JointSpec(scene.PRISMATIC, np.array([0.0, 1.0, 0.0]),
                        np.array([0.0, -0.0355, 0.0]),
                        limit_lower=-0.05, limit_upper=0.05, damping=jaw_damping),
    )
    jaw2, j2 = _box_link(
        "jaw_pos_y", 0.5, jaw_half, 0,
        scene.JointSpec(scene.PRISMATIC, np.array([0.0, 1.0, 0.0]),
                        np.array([0.0, 0.0355, 0.0]),
                        limit_lower=-0.05, limit_upper=0.05, damping=jaw_damping),
    )
    model = scene.ArticulatedModel((palm, jaw1, jaw2), (palm_joint, j1, j2), ())
    scene.validate_model(model)
    cm = kinematics.compile_model(model)

    box_half = (0.015, 0.012, 0.015)
    obj = scene.ObjectSpec(scene.Shape("box", box_half), sdf_resolution=32)
    grid = obj.build_grid()
    params = scene.make_system_params(
        0.1, obj.shape.solid_inertia(0.1), lin_damping=0.0, ang_damping=0.0
    )

    # 4 pad points on each jaw's inner face
    pads1 = np.array([[sx * 0.007, jaw_half[1], sz * 0.011]
                      for sx in (-1, 1) for sz in (-1, 1)])
    pads2 = pads1 * np.array([1.0, -1.0, 1.0])
    points = simulator.PointSet(
        body=np.array([1, 1, 1, 1, 2, 2, 2, 2], dtype=np.int64),
        local=jnp.asarray(np.concatenate([pads1, pads2])),
        mass=jnp.full(8, 0.5 / 4),
        alpha=0.0,
    )
    # inner faces sit at y = -/+(0.0355 - 0.005) + q; box faces at -/+0.012
    touch_travel = (0.0355 - jaw_half[1]) - box_half[1]
    info = dict(jaw_dofs=(6, 7), squeeze_sign=(1.0, -1.0), touch_travel=touch_travel,
                obj=obj)
    return cm, grid, points, params, info
