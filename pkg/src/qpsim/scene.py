"""Scene description: articulated model, object, demonstration, and file IO.

The `.scene` text format is documented in docs/formats.md. Parsing errors
carry path:line, validation errors carry a field path like "links[2].mass".
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from . import mesh as meshmod
from . import sdf as sdfmod

FREE, REVOLUTE, PRISMATIC = "free", "revolute", "prismatic"
_JOINT_TYPES = (FREE, REVOLUTE, PRISMATIC)
_SHAPE_KINDS = ("box", "sphere")


class SceneParseError(ValueError):
    pass


class SceneValidationError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclasses.dataclass(frozen=True)
class Shape:
    """Collision/sampling primitive: box (3 half extents) or sphere (radius)."""

    kind: str
    params: tuple[float, ...]

    def to_mesh(self) -> meshmod.TriMesh:
        if self.kind == "box":
            return meshmod.make_box(self.params)
        return meshmod.make_icosphere(self.params[0], subdivisions=2)

    def solid_inertia(self, mass: float) -> np.ndarray:
        if self.kind == "box":
            hx, hy, hz = self.params
            return mass / 3.0 * np.diag([hy * hy + hz * hz, hx * hx + hz * hz, hx * hx + hy * hy])
        r = self.params[0]
        return 0.4 * mass * r * r * np.eye(3)


@dataclasses.dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    inertia: np.ndarray  # 3x3 about the COM, in the link frame
    shape: Shape
    parent: int  # -1 for the root
    com: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))
    # com: shape center and center of mass, in the link frame (whose origin
    # sits at the joint)


@dataclasses.dataclass(frozen=True)
class JointSpec:
    """Joint connecting link i to its parent; joints[i] belongs to links[i]."""

    kind: str
    axis: np.ndarray  # unit, in the child frame (ignored for free roots)
    origin: np.ndarray  # child frame origin in the parent frame, meters
    limit_lower: float = -1e9
    limit_upper: float = 1e9
    damping: float = 0.0
    stiffness: float = 0.0


@dataclasses.dataclass(frozen=True)
class KeypointSpec:
    label: str
    link: int
    offset: np.ndarray  # meters, link frame


@dataclasses.dataclass(frozen=True)
class ArticulatedModel:
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    keypoints: tuple[KeypointSpec, ...]

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def keypoint_labels(self) -> tuple[str, ...]:
        return tuple(k.label for k in self.keypoints)

    def link_index(self, name: str) -> int:
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise KeyError(name)


@dataclasses.dataclass(frozen=True)
class ObjectSpec:
    shape: Shape
    sdf_resolution: int = 48
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)  # on the object only

    def build_grid(self) -> sdfmod.SdfGrid:
        return sdfmod.build_sdf_grid(self.shape.to_mesh(), self.sdf_resolution)


@dataclasses.dataclass(frozen=True)
class Demonstration:
    """Reference motion: labeled keypoint tracks plus an object pose track."""

    frame_rate: float  # Hz
    labels: tuple[str, ...]
    keypoints: np.ndarray  # (N, K, 3) meters
    object_quat: np.ndarray  # (N, 4) wxyz, unit
    object_pos: np.ndarray  # (N, 3) meters

    @property
    def num_frames(self) -> int:
        return len(self.object_pos)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class SystemParams:
    """Identifiable object-side parameters."""

    object_mass: jnp.ndarray  # kg, scalar
    object_inertia: jnp.ndarray  # 3x3 kg m^2, SPD, body frame
    linear_velocity_damping: jnp.ndarray  # 1/s, scalar
    angular_velocity_damping: jnp.ndarray  # 1/s, scalar


def make_system_params(mass, inertia, lin_damping=0.0, ang_damping=0.0) -> SystemParams:
    return SystemParams(
        object_mass=jnp.asarray(mass, dtype=jnp.float64),
        object_inertia=jnp.asarray(inertia, dtype=jnp.float64),
        linear_velocity_damping=jnp.asarray(lin_damping, dtype=jnp.float64),
        angular_velocity_damping=jnp.asarray(ang_damping, dtype=jnp.float64),
    )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class ControlTrajectory:
    """Per-frame actuation: joint forces, root velocity targets, and
    (when the point set is relaxed) per-point forces."""

    joint_forces: jnp.ndarray  # (N, n_r)
    root_velocities: jnp.ndarray  # (N, 6): linear xyz then angular xyz
    point_forces: jnp.ndarray | None = None  # (N, P, 3) or None


# ------------------------------------------------------------------ validation


def _check_spd(mat: np.ndarray) -> bool:
    if not np.allclose(mat, mat.T, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(mat).min() > 0.0)


def validate_model(model: ArticulatedModel) -> None:
    if len(model.links) != len(model.joints):
        raise SceneValidationError("joints", "one joint per link required")
    roots = [i for i, l in enumerate(model.links) if l.parent < 0]
    if len(roots) != 1:
        raise SceneValidationError("links", f"exactly one root required, found {len(roots)}")
    for i, link in enumerate(model.links):
        if link.mass <= 0.0:
            raise SceneValidationError(f"links[{i}].mass", f"must be > 0, got {link.mass}")
        if not _check_spd(np.asarray(link.inertia)):
            raise SceneValidationError(f"links[{i}].inertia", "must be symmetric positive definite")
        if link.parent >= i:
            raise SceneValidationError(
                f"links[{i}].parent", "parent index must precede the link (tree order)"
            )
        joint = model.joints[i]
        if joint.kind not in _JOINT_TYPES:
            raise SceneValidationError(f"joints[{i}].type", f"unknown type {joint.kind!r}")
        if (joint.kind == FREE) != (link.parent < 0):
            raise SceneValidationError(
                f"joints[{i}].type", "free joint exactly at the root"
            )
        if joint.kind != FREE:
            n = float(np.linalg.norm(joint.axis))
            if abs(n - 1.0) > 1e-6:
                raise SceneValidationError(f"joints[{i}].axis", f"must be unit, |axis| = {n:.6g}")
        if joint.limit_lower > joint.limit_upper:
            raise SceneValidationError(f"joints[{i}].limits", "lower > upper")
        if joint.damping < 0 or joint.stiffness < 0:
            raise SceneValidationError(f"joints[{i}].damping", "damping/stiffness must be >= 0")
    for k, kp in enumerate(model.keypoints):
        if not (0 <= kp.link < len(model.links)):
            raise SceneValidationError(f"keypoints[{k}].link", f"link index {kp.link} out of range")
    labels = model.keypoint_labels
    if len(set(labels)) != len(labels):
        raise SceneValidationError("keypoints", "duplicate labels")


def validate_demo(demo: Demonstration, model: ArticulatedModel | None = None) -> None:
    n = demo.num_frames
    if n < 2:
        raise SceneValidationError("demo.frames", f"need at least 2 frames, got {n}")
    if demo.frame_rate <= 0:
        raise SceneValidationError("demo.frame_rate", "must be > 0")
    if demo.keypoints.shape != (n, len(demo.labels), 3):
        raise SceneValidationError("demo.keypoints", f"shape {demo.keypoints.shape} inconsistent")
    for arr, field in ((demo.keypoints, "keypoints"), (demo.object_quat, "object_quat"),
                       (demo.object_pos, "object_pos")):
        if not np.all(np.isfinite(arr)):
            raise SceneValidationError(f"demo.{field}", "non-finite value")
    qn = np.linalg.norm(demo.object_quat, axis=1)
    if np.abs(qn - 1.0).max() > 1e-6:
        raise SceneValidationError("demo.object_quat", "quaternions must be unit")
    step = np.linalg.norm(np.diff(demo.object_pos, axis=0), axis=1)
    if step.max() >= 0.5:
        raise SceneValidationError(
            "demo.object_pos", f"frame-to-frame jump {step.max():.3g} m >= 0.5 m"
        )
    if model is not None:
        model_labels = set(model.keypoint_labels)
        demo_labels = set(demo.labels)
        if model_labels != demo_labels:
            missing = sorted(demo_labels - model_labels)
            extra = sorted(model_labels - demo_labels)
            raise SceneValidationError(
                "keypoints", f"label mismatch: demo-only {missing}, model-only {extra}"
            )


def validate_params(params: SystemParams) -> None:
    m = float(params.object_mass)
    if not (1e-3 <= m <= 100.0):
        raise SceneValidationError("object.mass", f"must be in [1e-3, 100], got {m}")
    if not _check_spd(np.asarray(params.object_inertia)):
        raise SceneValidationError("object.inertia", "must be symmetric positive definite")
    if float(params.linear_velocity_damping) < 0 or float(params.angular_velocity_damping) < 0:
        raise SceneValidationError("object.damping", "must be >= 0")


# ------------------------------------------------------------------ scene file


def _parse_shape(tokens: list[str], where: str) -> tuple[Shape, np.ndarray]:
    """Parse 'box hx hy hz [at ox oy oz]' or 'sphere r [at ox oy oz]'."""
    offset = np.zeros(3)
    if "at" in tokens:
        k = tokens.index("at")
        if len(tokens) != k + 4:
            raise SceneParseError(f"{where}: 'at' needs 3 numbers")
        offset = np.array([float(t) for t in tokens[k + 1 :]])
        tokens = tokens[:k]
    kind = tokens[0]
    if kind == "box":
        if len(tokens) != 4:
            raise SceneParseError(f"{where}: box needs 3 half extents")
        return Shape("box", tuple(float(t) for t in tokens[1:])), offset
    if kind == "sphere":
        if len(tokens) != 2:
            raise SceneParseError(f"{where}: sphere needs a radius")
        return Shape("sphere", (float(tokens[1]),)), offset
    raise SceneParseError(f"{where}: unknown shape {kind!r} (supported: {_SHAPE_KINDS})")


def _parse_joint(tokens: list[str], where: str) -> JointSpec:
    kind = tokens[0]
    if kind == "free":
        return JointSpec(FREE, np.zeros(3), np.zeros(3))
    fields = {"axis": 3, "origin": 3, "limits": 2, "damping": 1, "stiffness": 1}
    vals: dict[str, list[float]] = {}
    i = 1
    while i < len(tokens):
        key = tokens[i]
        if key not in fields:
            raise SceneParseError(f"{where}: unknown joint field {key!r}")
        n = fields[key]
        try:
            vals[key] = [float(t) for t in tokens[i + 1 : i + 1 + n]]
        except (ValueError, IndexError):
            raise SceneParseError(f"{where}: joint field {key!r} needs {n} numbers") from None
        if len(vals[key]) != n:
            raise SceneParseError(f"{where}: joint field {key!r} needs {n} numbers")
        i += 1 + n
    if kind not in (REVOLUTE, PRISMATIC):
        raise SceneParseError(f"{where}: unknown joint type {kind!r}")
    if "axis" not in vals:
        raise SceneParseError(f"{where}: joint needs an axis")
    lim = vals.get("limits", [-1e9, 1e9])
    return JointSpec(
        kind,
        np.array(vals["axis"]),
        np.array(vals.get("origin", [0.0, 0.0, 0.0])),
        lim[0],
        lim[1],
        vals.get("damping", [0.0])[0],
        vals.get("stiffness", [0.0])[0],
    )


def load_scene(path: str):
    """Parse a .scene file.

    Returns (ArticulatedModel, ObjectSpec, Demonstration, SystemParams).
    """
    with open(path) as fh:
        raw = fh.readlines()

    links: list[LinkSpec] = []
    joints: list[JointSpec] = []
    keypoints: list[KeypointSpec] = []
    link_names: dict[str, int] = {}
    obj: dict = {}
    demo_meta: dict = {}
    frames: list[tuple[int, list[float]]] = []

    cur: dict | None = None  # pending link or object block
    cur_kind = ""

    def finish_block(where: str):
        nonlocal cur, cur_kind
        if cur is None:
            return
        if cur_kind == "link":
            missing = [k for k in ("mass", "shape", "joint", "parent") if k not in cur]
            if missing:
                raise SceneParseError(f"{where}: link {cur['name']!r} missing {missing}")
            inertia = cur.get("inertia")
            if inertia is None:
                inertia = cur["shape"].solid_inertia(cur["mass"])
            links.append(
                LinkSpec(cur["name"], cur["mass"], inertia, cur["shape"], cur["parent"],
                         cur["shape_offset"])
            )
            joints.append(cur["joint"])
            link_names[cur["name"]] = len(links) - 1
        else:
            obj.update(cur)
        cur = None
        cur_kind = ""

    for lineno, line in enumerate(raw, start=1):
        where = f"{path}:{lineno}"
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        tok = text.split()
        key = tok[0]
        try:
            if key == "scene":
                finish_block(where)
            elif key == "link":
                finish_block(where)
                if len(tok) != 2:
                    raise SceneParseError(f"{where}: link needs a name")
                cur, cur_kind = {"name": tok[1]}, "link"
            elif key == "object":
                finish_block(where)
                cur, cur_kind = {}, "object"
            elif key == "keypoint":
                finish_block(where)
                if len(tok) != 6:
                    raise SceneParseError(f"{where}: keypoint needs label, link, 3 offsets")
                if tok[2] not in link_names:
                    raise SceneParseError(f"{where}: unknown link {tok[2]!r}")
                keypoints.append(
                    KeypointSpec(tok[1], link_names[tok[2]], np.array([float(t) for t in tok[3:6]]))
                )
            elif key == "demo":
                finish_block(where)
                if len(tok) < 4 or tok[2] != "labels":
                    raise SceneParseError(f"{where}: expected 'demo <frame_rate> labels <l1> ...'")
                demo_meta = {"frame_rate": float(tok[1]), "labels": tuple(tok[3:])}
            elif key == "frame":
                finish_block(where)
                if not demo_meta:
                    raise SceneParseError(f"{where}: frame before demo header")
                frames.append((lineno, [float(t) for t in tok[1:]]))
            elif cur is not None and cur_kind == "link":
                if key == "mass":
                    cur["mass"] = float(tok[1])
                elif key == "parent":
                    cur["parent"] = -1 if tok[1] in ("-1", "none") else link_names[tok[1]]
                elif key == "shape":
                    cur["shape"], cur["shape_offset"] = _parse_shape(tok[1:], where)
                elif key == "joint":
                    cur["joint"] = _parse_joint(tok[1:], where)
                elif key == "inertia":
                    if tok[1] == "auto":
                        cur["inertia"] = None
                    else:
                        if len(tok) != 10:
                            raise SceneParseError(f"{where}: inertia needs 'auto' or 9 numbers")
                        cur["inertia"] = np.array([float(t) for t in tok[1:]]).reshape(3, 3)
                else:
                    raise SceneParseError(f"{where}: unknown link field {key!r}")
            elif cur is not None and cur_kind == "object":
                if key == "shape":
                    cur["shape"], _ = _parse_shape(tok[1:], where)
                elif key in ("mass", "linear_damping", "angular_damping"):
                    cur[key] = float(tok[1])
                elif key == "gravity":
                    if len(tok) != 4:
                        raise SceneParseError(f"{where}: gravity needs 3 numbers")
                    cur["gravity"] = tuple(float(t) for t in tok[1:])
                elif key == "sdf_resolution":
                    cur["sdf_resolution"] = int(tok[1])
                elif key == "inertia":
                    if tok[1] == "auto":
                        cur["inertia"] = None
                    else:
                        if len(tok) != 10:
                            raise SceneParseError(f"{where}: inertia needs 'auto' or 9 numbers")
                        cur["inertia"] = np.array([float(t) for t in tok[1:]]).reshape(3, 3)
                else:
                    raise SceneParseError(f"{where}: unknown object field {key!r}")
            else:
                raise SceneParseError(f"{where}: unexpected {key!r}")
        except SceneParseError:
            raise
        except KeyError as e:
            raise SceneParseError(f"{where}: unknown link {e.args[0]!r}") from None
        except (ValueError, IndexError) as e:
            raise SceneParseError(f"{where}: {e}") from None

    finish_block(f"{path}:end")

    if not links:
        raise SceneParseError(f"{path}: no links found")
    if "shape" not in obj or "mass" not in obj:
        raise SceneParseError(f"{path}: object block missing shape or mass")
    if not demo_meta or not frames:
        raise SceneParseError(f"{path}: demonstration missing")

    labels = demo_meta["labels"]
    k = len(labels)
    want = 3 * k + 7
    kp_rows, quats, poss = [], [], []
    for lineno, vals in frames:
        if len(vals) != want:
            raise SceneParseError(
                f"{path}:{lineno}: frame needs {want} numbers "
                f"({k} keypoints + quat + position), got {len(vals)}"
            )
        kp_rows.append(np.array(vals[: 3 * k]).reshape(k, 3))
        quats.append(np.array(vals[3 * k : 3 * k + 4]))
        poss.append(np.array(vals[3 * k + 4 :]))

    model = ArticulatedModel(tuple(links), tuple(joints), tuple(keypoints))
    demo = Demonstration(
        demo_meta["frame_rate"], labels, np.stack(kp_rows), np.stack(quats), np.stack(poss)
    )
    inertia = obj.get("inertia")
    if inertia is None:
        inertia = obj["shape"].solid_inertia(obj["mass"])
    params = make_system_params(
        obj["mass"], inertia, obj.get("linear_damping", 0.0), obj.get("angular_damping", 0.0)
    )
    object_spec = ObjectSpec(
        obj["shape"], obj.get("sdf_resolution", 48), obj.get("gravity", (0.0, 0.0, -9.81))
    )

    validate_model(model)
    validate_demo(demo, model)
    validate_params(params)
    return model, object_spec, demo, params


def save_scene(path, model: ArticulatedModel, obj: ObjectSpec, demo: Demonstration,
               params: SystemParams, name: str = "scene") -> None:
    g = lambda x: f"{float(x):.17g}"
    out = [f"scene {name}", ""]
    for link, joint in zip(model.links, model.joints):
        out.append(f"link {link.name}")
        out.append(f"  mass {g(link.mass)}")
        out.append(f"  parent {-1 if link.parent < 0 else model.links[link.parent].name}")
        if joint.kind == FREE:
            out.append("  joint free")
        else:
            out.append(
                f"  joint {joint.kind} axis {' '.join(g(v) for v in joint.axis)}"
                f" origin {' '.join(g(v) for v in joint.origin)}"
                f" limits {g(joint.limit_lower)} {g(joint.limit_upper)}"
                f" damping {g(joint.damping)} stiffness {g(joint.stiffness)}"
            )
        out.append(
            f"  shape {link.shape.kind} {' '.join(g(v) for v in link.shape.params)}"
            f" at {' '.join(g(v) for v in link.com)}"
        )
        out.append(f"  inertia {' '.join(g(v) for v in np.asarray(link.inertia).ravel())}")
        out.append("")
    for kp in model.keypoints:
        out.append(
            f"keypoint {kp.label} {model.links[kp.link].name} {' '.join(g(v) for v in kp.offset)}"
        )
    out.append("")
    out.append("object")
    out.append(f"  shape {obj.shape.kind} {' '.join(g(v) for v in obj.shape.params)}")
    out.append(f"  mass {g(params.object_mass)}")
    out.append(f"  inertia {' '.join(g(v) for v in np.asarray(params.object_inertia).ravel())}")
    out.append(f"  linear_damping {g(params.linear_velocity_damping)}")
    out.append(f"  angular_damping {g(params.angular_velocity_damping)}")
    out.append(f"  gravity {' '.join(g(v) for v in obj.gravity)}")
    out.append(f"  sdf_resolution {obj.sdf_resolution}")
    out.append("")
    out.append(f"demo {g(demo.frame_rate)} labels {' '.join(demo.labels)}")
    for i in range(demo.num_frames):
        row = np.concatenate(
            [demo.keypoints[i].ravel(), demo.object_quat[i], demo.object_pos[i]]
        )
        out.append(f"frame {' '.join(g(v) for v in row)}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# ------------------------------------------------------------------ trajectory


def save_trajectory(path, q_r: np.ndarray, object_quat: np.ndarray, object_pos: np.ndarray):
    """Write per-frame rows: index, joint coordinates, object quat, position.

    Values are written with 9 significant digits; loading a saved file and
    saving again reproduces the file byte for byte.
    """
    q_r = np.atleast_2d(np.asarray(q_r))
    object_quat = np.atleast_2d(np.asarray(object_quat))
    object_pos = np.atleast_2d(np.asarray(object_pos))
    n = len(q_r)
    if n == 0:
        raise ValueError("empty trajectory")
    if len(object_quat) != n or len(object_pos) != n:
        raise ValueError("trajectory arrays disagree on frame count")
    for i in range(n):
        row = np.concatenate([q_r[i], object_quat[i], object_pos[i]])
        if not np.all(np.isfinite(row)):
            raise ValueError(f"non-finite value at frame {i}; refusing to save")
    try:
        with open(path, "w") as fh:
            for i in range(n):
                row = np.concatenate([q_r[i], object_quat[i], object_pos[i]])
                fh.write(f"{i} " + " ".join(f"{v:.9g}" for v in row) + "\n")
    except OSError as e:
        raise OSError(f"cannot write trajectory to {path}: {e}") from e


def load_trajectory(path):
    """Read a trajectory file; returns (q_r (N,n_r), quat (N,4), pos (N,3))."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            vals = text.split()
            try:
                idx = int(vals[0])
                nums = [float(v) for v in vals[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row") from None
            if idx != len(rows):
                raise ValueError(f"{path}:{lineno}: frame index {idx}, expected {len(rows)}")
            rows.append(nums)
    if not rows:
        raise ValueError(f"{path}: empty trajectory")
    width = len(rows[0])
    if width < 7 or any(len(r) != width for r in rows):
        raise ValueError(f"{path}: inconsistent row widths")
    arr = np.array(rows)
    return arr[:, : width - 7], arr[:, width - 7 : width - 3], arr[:, width - 3 :]
