"""Quaternion and rigid-transform math.

Quaternions are (w, x, y, z) arrays. All functions are pure jax.numpy and
work on plain numpy inputs too. Canonical sign (w >= 0) is applied
explicitly via `canonical` before any dot-product comparison; it is not
baked into the arithmetic ops.
"""

from __future__ import annotations

import jax.numpy as jnp

IDENTITY = jnp.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    return q / jnp.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q):
    """Resolve the double cover: flip sign so w >= 0."""
    return jnp.where(q[..., :1] < 0.0, -q, q)


def multiply(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return jnp.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conjugate(q):
    return q * jnp.array([1.0, -1.0, -1.0, -1.0])


def rotate(q, v):
    """Rotate vector(s) v by unit quaternion q (broadcasts on leading dims)."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * jnp.cross(qv, v)
    return v + w * t + jnp.cross(qv, t)


def rotate_inverse(q, v):
    return rotate(conjugate(q), v)


def to_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return jnp.stack(
        [
            jnp.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            jnp.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            jnp.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def from_axis_angle(axis, angle):
    axis = jnp.asarray(axis, dtype=jnp.float64)
    axis = axis / jnp.linalg.norm(axis)
    half = 0.5 * angle
    return jnp.concatenate([jnp.cos(half)[None], jnp.sin(half) * axis])


def exp_map(w):
    """Quaternion exponential of a rotation vector w (axis * angle).

    Smooth AND differentiable through w = 0: the norm is never evaluated (or
    differentiated) at the origin; a Taylor branch covers angles below 1e-9,
    where it agrees with the exact form beyond double precision.
    """
    sq = jnp.sum(w * w)
    small = sq < 1e-18
    angle = jnp.sqrt(jnp.where(small, 1.0, sq))
    half = 0.5 * angle
    s = jnp.where(small, 0.5 - sq / 48.0, jnp.sin(half) / angle)
    c = jnp.where(small, 1.0 - sq / 8.0, jnp.cos(half))
    return jnp.concatenate([c[None], s * w])


def integrate(q, omega, dt):
    """Advance unit quaternion q by angular velocity omega (rad/s) over dt.

    Exact exponential-map update; returns a unit quaternion, and q itself
    when omega = 0.
    """
    return normalize(multiply(exp_map(jnp.asarray(omega) * dt), q))


def geodesic_angle(a, b):
    """Rotation angle (rad) between two unit quaternions, double-cover safe."""
    d = jnp.clip(jnp.abs(jnp.sum(a * b, axis=-1)), 0.0, 1.0)
    return 2.0 * jnp.arccos(d)


def transform_point(q, t, p):
    """Apply rigid transform (rotation q, translation t) to point(s) p."""
    return rotate(q, p) + t


def inverse_transform_point(q, t, p):
    return rotate_inverse(q, p - t)


def compose(q1, t1, q2, t2):
    """Compose rigid transforms: result = (q1, t1) ∘ (q2, t2)."""
    return normalize(multiply(q1, q2)), rotate(q1, t2) + t1
