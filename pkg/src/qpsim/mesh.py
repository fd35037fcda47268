"""Triangle meshes: construction, ASCII IO, sampling, watertightness.

Meshes here are small collision proxies (boxes, spheres, convex-ish pieces),
so everything is plain numpy; nothing in this module is differentiated.
"""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh. vertices (V,3) float64, faces (F,3) int32."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int32)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F,3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


def face_normals_areas(mesh: TriMesh):
    """Per-face unit normals (F,3) and areas (F,). Degenerate faces get area 0."""
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    cr = np.cross(b - a, c - a)
    dbl = np.linalg.norm(cr, axis=1)
    area = 0.5 * dbl
    n = cr / np.where(dbl > 0.0, dbl, 1.0)[:, None]
    return n, area


def surface_area(mesh: TriMesh) -> float:
    return float(face_normals_areas(mesh)[1].sum())


def open_edge_count(mesh: TriMesh) -> int:
    """Number of directed edges without an opposite-direction partner.

    Zero for a closed, consistently oriented 2-manifold.
    """
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    fwd = set(map(tuple, edges.tolist()))
    open_count = 0
    for e in fwd:
        if (e[1], e[0]) not in fwd:
            open_count += 1
    return open_count


def is_watertight(mesh: TriMesh) -> bool:
    return mesh.num_faces > 0 and open_edge_count(mesh) == 0


def make_box(half_extents) -> TriMesh:
    """Axis-aligned box centered at the origin, 12 triangles, outward normals."""
    hx, hy, hz = (float(h) for h in np.asarray(half_extents, dtype=np.float64))
    if min(hx, hy, hz) <= 0.0:
        raise ValueError("half extents must be positive")
    v = np.array(
        [
            [-hx, -hy, -hz],
            [+hx, -hy, -hz],
            [+hx, +hy, -hz],
            [-hx, +hy, -hz],
            [-hx, -hy, +hz],
            [+hx, -hy, +hz],
            [+hx, +hy, +hz],
            [-hx, +hy, +hz],
        ]
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # -z
            [4, 5, 6], [4, 6, 7],  # +z
            [0, 1, 5], [0, 5, 4],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [1, 2, 6], [1, 6, 5],  # +x
            [3, 0, 4], [3, 4, 7],  # -x
        ],
        dtype=np.int32,
    )
    return TriMesh(v, f)


def make_icosphere(radius: float, subdivisions: int = 2) -> TriMesh:
    """Subdivided icosahedron projected to a sphere of the given radius."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if subdivisions < 0 or subdivisions > 6:
        raise ValueError("subdivisions must be in [0, 6]")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        vlist = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                p = vlist[i] + vlist[j]
                vlist.append(p / np.linalg.norm(p))
                midpoint[key] = len(vlist) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces.astype(np.int32))


def sample_surface(mesh: TriMesh, count: int, rng: np.random.Generator):
    """Uniform points on the surface. Returns (points (N,3), normals (N,3))."""
    if count <= 0:
        raise ValueError("count must be positive")
    normals, areas = face_normals_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero surface area")
    fi = rng.choice(len(areas), size=count, p=areas / total)
    # uniform barycentric coordinates via the square-root trick
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    w0, w1, w2 = 1.0 - r1, r1 * (1.0 - r2), r1 * r2
    tri = mesh.vertices[mesh.faces[fi]]
    pts = w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]
    return pts, normals[fi]


def save_mesh(path: str, mesh: TriMesh) -> None:
    """Write the ASCII format: header line, then vertex and face lines."""
    with open(path, "w") as fh:
        fh.write(f"trimesh {mesh.num_vertices} {mesh.num_faces}\n")
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_mesh(path: str) -> TriMesh:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("trimesh "):
        raise ValueError(f"{path}: not a trimesh file")
    _, nv, nf = lines[0].split()
    nv, nf = int(nv), int(nf)
    verts, faces = [], []
    for ln in lines[1:]:
        tag, *rest = ln.split()
        if tag == "v":
            verts.append([float(x) for x in rest])
        elif tag == "f":
            faces.append([int(x) for x in rest])
        else:
            raise ValueError(f"{path}: unknown record '{tag}'")
    if len(verts) != nv or len(faces) != nf:
        raise ValueError(f"{path}: header count mismatch")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int32))
