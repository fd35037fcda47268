"""Bundled desk-scale test scene: a 3-finger planar hand and a box.

The hand has a free-floating palm and three 3-link fingers (9 revolute
joints about y, so fingers curl in the x-z plane). Two fingers approach the
box from above, the thumb from below; the demonstration closes the grasp,
then pitches the hand while the object reference pitches further and lifts.
The extra object rotation cannot be met by rigidly mimicking the hand, so
trackers must exploit contact forces.

Frame convention: link origins sit at joints, +x points along each finger.
"""

from __future__ import annotations

import importlib.resources

import numpy as np

from . import kinematics, quat, scene

PALM_HALF = (0.028, 0.055, 0.012)
FINGER_LENGTHS = (0.036, 0.032, 0.028)
FINGER_BASE_X = 0.05
FINGER_OFFSETS = (  # (y, z) of each finger base on the palm: two up, thumb down
    (0.03, 0.032),
    (-0.03, 0.032),
    (0.0, -0.032),
)
LINK_MASS = 0.25
PALM_MASS = 1.5
LINK_HALF_WIDTH = 0.007
# strong viscous joints: the solver treats damping implicitly, so this is
# stable at any value and it keeps finger rates bounded when the widest
# contact shell slams multi-kN forces onto the hand
JOINT_DAMPING = 5.0
OBJECT_MASS = 1.0
# the box is a shell, not a solid: walls carry the mass, so its inertia runs
# well above the solid-box value. Heavy parts keep the softest contact stage
# (forces ~kN at decimeter range) inside the stable region of the integrator.
OBJECT_INERTIA_SCALE = 2.5
NUM_FRAMES = 60
FRAME_RATE = 100.0
SAMPLES_PER_LINK = 6

# demonstration script
CURL_UP = (0.05, 0.06, 0.07)  # per-joint curl of the two upper fingers, rad
CURL_DOWN = (-0.05, -0.06, -0.07)  # thumb curls the opposite way
OPEN_SCALE = 0.4  # fingers start partially open
# the hand starts fully outside the widest contact shell (10 cm), so soft
# long-range forces ramp in with the approach instead of firing all at once
APPROACH_X = -0.12
HAND_PITCH = -0.3  # palm pitch about y during the turn phase, rad
EXTRA_PITCH = -0.2  # additional in-grasp object pitch the hand cannot mimic
OBJECT_LIFT = 0.012  # object reference rise along z, m
GRASP_FRAME = 24  # script: approach/close for frames [0, 24), then turn


def make_model() -> scene.ArticulatedModel:
    links = [
        scene.LinkSpec(
            "palm",
            PALM_MASS,
            scene.Shape("box", PALM_HALF).solid_inertia(PALM_MASS),
            scene.Shape("box", PALM_HALF),
            -1,
            np.array([0.5 * PALM_HALF[0], 0.0, 0.0]),
        )
    ]
    joints = [scene.JointSpec(scene.FREE, np.zeros(3), np.zeros(3))]
    for fi, (fy, fz) in enumerate(FINGER_OFFSETS, start=1):
        parent = 0
        for seg, seg_len in enumerate(FINGER_LENGTHS):
            name = f"f{fi}_{('prox', 'mid', 'dist')[seg]}"
            shape = scene.Shape("box", (seg_len / 2, LINK_HALF_WIDTH, LINK_HALF_WIDTH))
            links.append(
                scene.LinkSpec(
                    name,
                    LINK_MASS,
                    shape.solid_inertia(LINK_MASS),
                    shape,
                    parent,
                    np.array([seg_len / 2, 0.0, 0.0]),
                )
            )
            origin = (
                np.array([FINGER_BASE_X, fy, fz])
                if seg == 0
                else np.array([FINGER_LENGTHS[seg - 1], 0.0, 0.0])
            )
            joints.append(
                scene.JointSpec(
                    scene.REVOLUTE,
                    np.array([0.0, 1.0, 0.0]),
                    origin,
                    limit_lower=-1.4,
                    limit_upper=1.4,
                    damping=JOINT_DAMPING,
                    stiffness=0.0,
                )
            )
            parent = len(links) - 1
    keypoints = []
    for label, link_name, offset in (
        ("wrist_a", "palm", (0.0, 0.0, 0.0)),
        ("wrist_b", "palm", (0.01, 0.045, 0.0)),
        ("wrist_c", "palm", (0.01, -0.045, 0.0)),
        ("f1_mid", "f1_mid", (FINGER_LENGTHS[1], 0.0, 0.0)),
        ("f2_mid", "f2_mid", (FINGER_LENGTHS[1], 0.0, 0.0)),
        ("f3_mid", "f3_mid", (FINGER_LENGTHS[1], 0.0, 0.0)),
        ("f1_tip", "f1_dist", (FINGER_LENGTHS[2], 0.0, 0.0)),
        ("f2_tip", "f2_dist", (FINGER_LENGTHS[2], 0.0, 0.0)),
        ("f3_tip", "f3_dist", (FINGER_LENGTHS[2], 0.0, 0.0)),
    ):
        model_stub = scene.ArticulatedModel(tuple(links), tuple(joints), ())
        keypoints.append(
            scene.KeypointSpec(label, model_stub.link_index(link_name), np.array(offset))
        )
    return scene.ArticulatedModel(tuple(links), tuple(joints), tuple(keypoints))


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def script_hand_q(model: scene.ArticulatedModel, frame: int) -> np.ndarray:
    """Scripted hand configuration (n_r,) for one demo frame."""
    del model
    n_frames_close = GRASP_FRAME
    close = _smoothstep(frame / n_frames_close)
    turn = _smoothstep((frame - GRASP_FRAME) / (NUM_FRAMES - 1 - GRASP_FRAME))
    q = np.zeros(6 + 9)
    q[0] = APPROACH_X * (1.0 - close)
    q[4] = HAND_PITCH * turn  # root pitch about y
    for fi in range(3):
        base = CURL_UP if fi < 2 else CURL_DOWN
        for seg in range(3):
            lo = base[seg] * OPEN_SCALE
            q[6 + 3 * fi + seg] = lo + (base[seg] - lo) * close
    return q


def _distal_midpoints(model: scene.ArticulatedModel, q: np.ndarray) -> np.ndarray:
    """Axis midpoints (3,3) of the three distal links at configuration q."""
    cm = kinematics.compile_model(model)
    kp = np.asarray(kinematics.keypoint_positions(cm, q))
    labels = list(model.keypoint_labels)
    out = []
    for f in ("f1", "f2", "f3"):
        out.append(0.5 * (kp[labels.index(f + "_mid")] + kp[labels.index(f + "_tip")]))
    return np.stack(out)


def grasp_center(model: scene.ArticulatedModel) -> np.ndarray:
    """Center of the closed grasp: between the distal links, under their midpoints."""
    mids = _distal_midpoints(model, script_hand_q(model, GRASP_FRAME))
    return 0.5 * (0.5 * (mids[0] + mids[1]) + mids[2])


def object_pose(center: np.ndarray, frame: int):
    """Reference object pose: swept along with the pitching hand (pivot at the
    root origin), plus extra pitch about its own center and a small lift."""
    turn = _smoothstep((frame - GRASP_FRAME) / (NUM_FRAMES - 1 - GRASP_FRAME))
    axis = np.array([0.0, 1.0, 0.0])
    qo = np.asarray(quat.from_axis_angle(axis, (HAND_PITCH + EXTRA_PITCH) * turn))
    q_hand = np.asarray(quat.from_axis_angle(axis, HAND_PITCH * turn))
    pos = np.asarray(quat.rotate(q_hand, center)) + np.array([0.0, 0.0, OBJECT_LIFT * turn])
    return qo, pos


def make_scene():
    """Build the bundled scene; returns (model, object_spec, demo, params)."""
    model = make_model()
    cm = kinematics.compile_model(model)
    center = grasp_center(model)

    kps, quats, poss = [], [], []
    for frame in range(NUM_FRAMES):
        q = script_hand_q(model, frame)
        kps.append(np.asarray(kinematics.keypoint_positions(cm, q)))
        qo, po = object_pose(center, frame)
        quats.append(qo)
        poss.append(po)
    demo = scene.Demonstration(
        FRAME_RATE, model.keypoint_labels, np.stack(kps), np.stack(quats), np.stack(poss)
    )

    # size the box to sit just inside the closed distal links; wide enough in
    # y to span all three finger tracks (fingers run at y = ±0.03 and 0)
    mids = _distal_midpoints(model, script_hand_q(model, GRASP_FRAME))
    gap = 0.5 * (mids[0][2] + mids[1][2]) - mids[2][2]
    half_z = round(abs(gap) / 2 - LINK_HALF_WIDTH - 0.0015, 4)
    obj_shape = scene.Shape("box", (0.024, 0.04, half_z))
    # free-floating task: the demonstration assumes no weight to fight
    obj_spec = scene.ObjectSpec(obj_shape, sdf_resolution=40, gravity=(0.0, 0.0, 0.0))
    params = scene.make_system_params(
        OBJECT_MASS,
        OBJECT_INERTIA_SCALE * obj_shape.solid_inertia(OBJECT_MASS),
        lin_damping=1.0,
        ang_damping=1.0,
    )
    return model, obj_spec, demo, params


def make_point_set(model: scene.ArticulatedModel, alpha: float):
    """Contact sample points for the bundled hand: mid and distal finger links.

    The palm and proximal segments stay out of the set. They never touch the
    box, but inside the widest contact shell (10 cm) every sampled point adds
    spring and damper load, and too many loaded points at the bundled scale
    would push the explicit part of the integrator past its stable region.
    """
    from . import simulator

    finger_links = [
        model.link_index(f"f{fi}_{seg}") for fi in (1, 2, 3) for seg in ("mid", "dist")
    ]
    return simulator.build_point_set(
        model, alpha, samples_per_link=SAMPLES_PER_LINK, links=finger_links
    )


def bundled_scene_path() -> str:
    ref = importlib.resources.files("qpsim") / "assets" / "planar_3finger_box.scene"
    return str(ref)


def write_bundled_scene(path: str | None = None) -> str:
    if path is None:
        path = bundled_scene_path()
    model, obj_spec, demo, params = make_scene()
    scene.save_scene(path, model, obj_spec, demo, params, name="planar_3finger_box")
    return path


if __name__ == "__main__":
    print(write_bundled_scene())
