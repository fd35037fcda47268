"""Signed distance fields.

Grids are built once (numpy, not differentiated) and queried inside jitted
simulation code (jax, differentiable). Sign is recovered from the
generalized winding number, distance from exact point-triangle projection,
so the builder needs a watertight, consistently oriented mesh.
"""

from __future__ import annotations

import dataclasses
import struct

import jax
import jax.numpy as jnp
import numpy as np

from . import mesh as meshmod

_MAGIC = b"QSDF"
_VERSION = 1


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class SdfGrid:
    """Dense cubic-cell SDF. values (nx,ny,nz) m; gradients (nx,ny,nz,3)."""

    origin: jnp.ndarray
    cell_size: jnp.ndarray
    values: jnp.ndarray
    gradients: jnp.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def _closest_dist_sq(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distance from points p (n,3) to each triangle tri (F,3,3) -> (n,F)."""
    dot = lambda x, y: np.einsum("...k,...k->...", x, y)
    a = tri[None, :, 0]
    ab = tri[None, :, 1] - a
    ac = tri[None, :, 2] - a
    ap = p[:, None, :] - a

    d1 = dot(ab, ap)
    d2 = dot(ac, ap)

    bp = ap - ab
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)

    cp = ap - ac
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    eps = 1e-30
    # barycentric coordinates of the projection, clamped region by region
    v_ab = d1 / np.where(np.abs(d1 - d3) > eps, d1 - d3, eps)
    w_ac = d2 / np.where(np.abs(d2 - d6) > eps, d2 - d6, eps)
    w_bc = (d4 - d3) / np.where(np.abs((d4 - d3) + (d5 - d6)) > eps, (d4 - d3) + (d5 - d6), eps)
    denom = va + vb + vc
    denom = np.where(np.abs(denom) > eps, denom, eps)
    v_in = vb / denom
    w_in = vc / denom

    v = v_in
    w = w_in
    # edge BC region
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    v = np.where(m, 1.0 - w_bc, v)
    w = np.where(m, w_bc, w)
    # edge AC region
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    v = np.where(m, 0.0, v)
    w = np.where(m, w_ac, w)
    # edge AB region
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    v = np.where(m, v_ab, v)
    w = np.where(m, 0.0, w)
    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    v = np.where(m, 0.0, v)
    w = np.where(m, 0.0, w)
    m = (d3 >= 0) & (d4 <= d3)
    v = np.where(m, 1.0, v)
    w = np.where(m, 0.0, w)
    m = (d6 >= 0) & (d5 <= d6)
    v = np.where(m, 0.0, v)
    w = np.where(m, 1.0, w)

    closest = a + v[..., None] * ab + w[..., None] * ac
    diff = p[:, None, :] - closest
    return np.einsum("nfk,nfk->nf", diff, diff)


def _winding_number(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Generalized winding number of points p (n,3) w.r.t. triangles (F,3,3)."""
    a = tri[None, :, 0] - p[:, None, :]
    b = tri[None, :, 1] - p[:, None, :]
    c = tri[None, :, 2] - p[:, None, :]
    la = np.linalg.norm(a, axis=-1)
    lb = np.linalg.norm(b, axis=-1)
    lc = np.linalg.norm(c, axis=-1)
    num = np.einsum("nfk,nfk->nf", a, np.cross(b, c))
    den = (
        la * lb * lc
        + np.einsum("nfk,nfk->nf", a, b) * lc
        + np.einsum("nfk,nfk->nf", b, c) * la
        + np.einsum("nfk,nfk->nf", c, a) * lb
    )
    omega = 2.0 * np.arctan2(num, den)
    return omega.sum(axis=1) / (4.0 * np.pi)


def build_sdf_grid(mesh: meshmod.TriMesh, resolution: int = 64) -> SdfGrid:
    """Sample a signed distance grid over the mesh AABB inflated by 25%.

    The grid is cubic-celled with `resolution` samples per axis. Negative
    inside. Rejects meshes that are not closed orientable surfaces, since
    the winding-number sign is meaningless for those.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    open_edges = meshmod.open_edge_count(mesh)
    if mesh.num_faces == 0 or open_edges != 0:
        raise ValueError(
            f"mesh is not watertight: {open_edges} open edges "
            f"({mesh.num_faces} faces); cannot assign inside/outside sign"
        )

    verts = mesh.vertices
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 1.25 * float(np.max(hi - lo)) * 0.5
    if half <= 0.0:
        raise ValueError("mesh has zero extent")
    cell = 2.0 * half / (resolution - 1)
    origin = center - half

    axes = [origin[k] + cell * np.arange(resolution) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    tri64 = verts[mesh.faces]
    tri32 = tri64.astype(np.float32)
    pts32 = pts.astype(np.float32)
    dist = np.empty(len(pts), dtype=np.float64)
    wind = np.empty(len(pts), dtype=np.float64)
    chunk = max(1, int(2.0e6 // max(1, mesh.num_faces)))
    for s in range(0, len(pts), chunk):
        d2 = _closest_dist_sq(pts32[s : s + chunk], tri32)
        dist[s : s + chunk] = np.sqrt(d2.min(axis=1).astype(np.float64))
        wind[s : s + chunk] = _winding_number(pts[s : s + chunk], tri64)

    sign = np.where(wind > 0.5, -1.0, 1.0)
    values = (sign * dist).reshape(resolution, resolution, resolution)
    grads = np.stack(np.gradient(values, cell, axis=(0, 1, 2)), axis=-1)

    return SdfGrid(
        origin=jnp.asarray(origin),
        cell_size=jnp.asarray(cell),
        values=jnp.asarray(values),
        gradients=jnp.asarray(grads),
    )


def _trilinear(field: jnp.ndarray, i0: jnp.ndarray, frac: jnp.ndarray) -> jnp.ndarray:
    """Interpolate `field` (nx,ny,nz[,C]) at integer base i0 (...,3) + frac (...,3)."""
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    if field.ndim == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]

    def at(dx, dy, dz):
        return field[ix + dx, iy + dy, iz + dz]

    c00 = at(0, 0, 0) * (1 - fx) + at(1, 0, 0) * fx
    c10 = at(0, 1, 0) * (1 - fx) + at(1, 1, 0) * fx
    c01 = at(0, 0, 1) * (1 - fx) + at(1, 0, 1) * fx
    c11 = at(0, 1, 1) * (1 - fx) + at(1, 1, 1) * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sdf_query(grid: SdfGrid, p: jnp.ndarray):
    """Signed distance, outward unit normal, and surface projection at p (...,3).

    Total function: points outside the grid get the boundary value plus the
    straight-line distance to the boundary, so sd keeps growing linearly.
    """
    dims = jnp.array(grid.values.shape)
    u = (p - grid.origin) / grid.cell_size
    uc = jnp.clip(u, 0.0, dims - 1.0)
    i0 = jnp.clip(jnp.floor(uc).astype(jnp.int32), 0, dims - 2)
    frac = uc - i0

    sd_in = _trilinear(grid.values, i0, frac)
    g = _trilinear(grid.gradients, i0, frac)

    # Outside the box: add distance from p to its clamp point. The untaken
    # branch is sanitized before the norm so reverse-mode stays finite.
    p_clamp = grid.origin + uc * grid.cell_size
    out_vec = p - p_clamp
    is_out = jnp.any((u < 0.0) | (u > dims - 1.0), axis=-1)
    safe_vec = jnp.where(is_out[..., None], out_vec, jnp.ones_like(out_vec))
    out_dist = jnp.linalg.norm(safe_vec, axis=-1)
    out_dir = safe_vec / out_dist[..., None]
    sd = sd_in + jnp.where(is_out, out_dist, 0.0)
    n_raw = g + jnp.where(is_out[..., None], out_dir, 0.0)

    degen = jnp.sum(n_raw * n_raw, axis=-1) < 1e-18
    safe_n = jnp.where(degen[..., None], jnp.array([0.0, 0.0, 1.0]), n_raw)
    normal = safe_n / jnp.linalg.norm(safe_n, axis=-1, keepdims=True)
    nearest = p - sd[..., None] * normal
    return sd, normal, nearest


def sphere_sd(p, center, radius):
    return jnp.linalg.norm(p - jnp.asarray(center), axis=-1) - radius


def box_sd(p, center, half_extents):
    q = jnp.abs(p - jnp.asarray(center)) - jnp.asarray(half_extents)
    outside = jnp.linalg.norm(jnp.maximum(q, 0.0), axis=-1)
    inside = jnp.minimum(jnp.max(q, axis=-1), 0.0)
    return outside + inside


def capsule_sd(p, a, b, radius):
    a = jnp.asarray(a)
    ab = jnp.asarray(b) - a
    t = jnp.clip(jnp.sum((p - a) * ab, axis=-1) / jnp.sum(ab * ab), 0.0, 1.0)
    return jnp.linalg.norm(p - (a + t[..., None] * ab), axis=-1) - radius


def analytic_query(sd_fn, p: jnp.ndarray):
    """(sd, normal, nearest) for a closed-form distance function at one point."""
    sd, n = jax.value_and_grad(sd_fn)(p)
    normal = n / jnp.linalg.norm(n)
    return sd, normal, p - sd * normal


def save_sdf(path: str, grid: SdfGrid) -> None:
    values = np.asarray(grid.values, dtype=np.float64)
    grads = np.asarray(grid.gradients, dtype=np.float64)
    nx, ny, nz = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI3H2x", _MAGIC, _VERSION, nx, ny, nz))
        fh.write(struct.pack("<3d", *np.asarray(grid.origin, dtype=np.float64)))
        fh.write(struct.pack("<d", float(grid.cell_size)))
        fh.write(values.tobytes(order="C"))
        fh.write(grads.tobytes(order="C"))


def load_sdf(path: str) -> SdfGrid:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise ValueError(f"{path}: truncated header")
        magic, version, nx, ny, nz = struct.unpack("<4sI3H2x", head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        origin = np.frombuffer(fh.read(24), dtype="<f8").copy()
        cell = struct.unpack("<d", fh.read(8))[0]
        n = nx * ny * nz
        values = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(nx, ny, nz).copy()
        grads = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(nx, ny, nz, 3).copy()
    return SdfGrid(
        origin=jnp.asarray(origin),
        cell_size=jnp.asarray(cell),
        values=jnp.asarray(values),
        gradients=jnp.asarray(grads),
    )
