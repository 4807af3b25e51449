"""Quaternion and rotation-vector algebra.

Quaternions are numpy arrays with the last axis holding ``(x, y, z, w)``.
All functions broadcast over leading axes. Rotation vectors use the
full-angle convention: magnitude equals the rotation angle in radians.

Camera frame: x to the right, y down, z pointing into the image plane.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])

# below this rotation angle log/exp switch to their series expansions
SMALL_ANGLE = 1e-4


def smoothclip(x):
    """``ELU(x) + 1``: x + 1 for x >= 0 and exp(x) otherwise."""
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def smoothclip_grad(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def raw_quat(z):
    """Unnormalized quaternion ``(z0, z1, z2, smoothclip(z3))``."""
    z = np.asarray(z, dtype=float)
    return np.concatenate([z[..., :3], smoothclip(z[..., 3:4])], axis=-1)


def quat_from_features(z):
    """Map four unconstrained features to a unit quaternion with w > 0.

    The real part goes through :func:`smoothclip`, which biases the
    output toward the identity and removes the q / -q ambiguity.
    """
    qp = raw_quat(z)
    return qp / np.linalg.norm(qp, axis=-1, keepdims=True)


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q):
    """Representative of ``q`` with non-negative real part."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., 3:4] < 0.0, -q, q)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_inverse(q):
    """Inverse of a quaternion (conjugate divided by squared norm)."""
    q = np.asarray(q, dtype=float)
    return quat_conj(q) / np.sum(q * q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + bw * ax + ay * bz - az * by,
            aw * by + bw * ay + az * bx - ax * bz,
            aw * bz + bw * az + ax * by - ay * bx,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def right_mul_matrix(b):
    """Matrix ``P`` such that ``quat_mul(a, b) == P @ a``."""
    bx, by, bz, bw = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    rows = [
        [bw, bz, -by, bx],
        [-bz, bw, bx, by],
        [by, -bx, bw, bz],
        [-bx, -by, -bz, bw],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def log_map(q):
    """Rotation vector ``theta * axis`` of a unit quaternion, theta in [0, pi]."""
    q = canonical(q)
    v = q[..., :3]
    w = q[..., 3]
    n = np.linalg.norm(v, axis=-1)
    small = 2.0 * np.arctan2(n, w) < SMALL_ANGLE
    n_safe = np.where(small, 1.0, n)
    w_safe = np.where(small, w, 1.0)
    t2 = (n / w_safe) ** 2
    factor = np.where(
        small,
        (2.0 / w_safe) * (1.0 - t2 / 3.0 + t2 * t2 / 5.0),
        2.0 * np.arctan2(n, w) / n_safe,
    )
    return factor[..., None] * v


def exp_map(v):
    """Unit quaternion (w >= 0) for a full-angle rotation vector."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < SMALL_ANGLE
    th_safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    k = np.where(
        small,
        0.5 * (1.0 - t2 / 24.0 + t2 * t2 / 1920.0),
        np.sin(0.5 * theta) / th_safe,
    )
    q = np.concatenate([k[..., None] * v, np.cos(0.5 * theta)[..., None]], axis=-1)
    return canonical(q)


def geodesic_error(qhat, q):
    """Rotation angle (radians) of ``qhat^-1 q``; sign-invariant in both."""
    rel = quat_mul(quat_conj(qhat), q)
    n = np.linalg.norm(rel[..., :3], axis=-1)
    return 2.0 * np.arctan2(n, np.abs(rel[..., 3]))


def quat_to_matrix(q):
    q = normalize(q)
    x, y, z, w = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def cross(a, b):
    """Cross product over the last axis (cheaper than ``np.cross`` for small arrays)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    uv = cross(u, v)
    return v + 2.0 * w * uv + 2.0 * cross(u, uv)


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    return exp_map(axis * np.asarray(angle, dtype=float)[..., None])


def from_euler(yaw, pitch, roll):
    """Quaternion for ``R = R_y(yaw) R_x(pitch) R_z(roll)``, angles in degrees."""
    a, b, c = (np.deg2rad(np.asarray(t, dtype=float)) * 0.5 for t in (yaw, pitch, roll))
    zero = np.zeros_like(a + b + c)
    qy = np.stack([zero, np.sin(a) + zero, zero, np.cos(a) + zero], axis=-1)
    qx = np.stack([np.sin(b) + zero, zero, zero, np.cos(b) + zero], axis=-1)
    qz = np.stack([zero, zero, np.sin(c) + zero, np.cos(c) + zero], axis=-1)
    return canonical(quat_mul(quat_mul(qy, qx), qz))


def to_euler(q):
    """Inverse of :func:`from_euler`; returns ``(..., 3)`` yaw, pitch, roll in degrees.

    At gimbal lock (|pitch| = 90 deg) the roll is set to zero.
    """
    m = quat_to_matrix(q)
    sp = np.clip(-m[..., 1, 2], -1.0, 1.0)
    pitch = np.arcsin(sp)
    locked = np.abs(sp) > 1.0 - 1e-12
    yaw = np.where(
        locked,
        np.arctan2(-m[..., 2, 0], m[..., 0, 0]),
        np.arctan2(m[..., 0, 2], m[..., 2, 2]),
    )
    roll = np.where(locked, 0.0, np.arctan2(m[..., 1, 0], m[..., 1, 1]))
    return np.rad2deg(np.stack([yaw, pitch, roll], axis=-1))


# row-major positions of the six lower-triangular entries
TRIL_ROWS = np.array([0, 1, 1, 2, 2, 2])
TRIL_COLS = np.array([0, 0, 1, 0, 1, 2])


def tril_from_features(m):
    m = np.asarray(m, dtype=float)
    out = np.zeros(m.shape[:-1] + (3, 3))
    out[..., TRIL_ROWS, TRIL_COLS] = m
    return out


def covariance_from_features(m, eps=1e-4):
    """Positive-definite ``M M^T + eps I`` from six lower-triangular entries."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    lower = tril_from_features(m)
    return lower @ np.swapaxes(lower, -1, -2) + eps * np.eye(3)


def mean_quaternion(qs):
    """Hemisphere-aligned, renormalized componentwise mean.

    Every quaternion is sign-flipped to agree with the first before
    averaging.
    """
    qs = np.asarray(qs, dtype=float)
    if qs.ndim != 2 or len(qs) == 0:
        raise ValueError("expected a non-empty (N, 4) array")
    signs = np.where(qs @ qs[0] < 0.0, -1.0, 1.0)
    aligned = qs * signs[:, None]
    if np.all(aligned == aligned[0]):
        return aligned[0].copy()  # exact: identical inputs average to themselves
    mean = np.mean(aligned, axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ValueError("aligned quaternion average is degenerate")
    return mean / norm


def random_quaternions(rng, n):
    """Uniformly distributed unit quaternions (canonical sign)."""
    return canonical(normalize(rng.normal(size=(n, 4))))
