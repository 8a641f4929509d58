"""Rotation helpers (quaternions are w-first, matrices act on column vectors)."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Unit quaternions; zero rows stay zero."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return np.divide(q, norm, out=np.zeros_like(q), where=norm > 0)


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b of w-first quaternions (broadcasting)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of (normalized) w-first quaternions, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(normalize_quaternions(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def matrix_to_quaternion(rotations: np.ndarray) -> np.ndarray:
    """w-first unit quaternions with w >= 0 for rotation matrices (..., 3, 3)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    shape = rotations.shape[:-2]
    xyzw = Rotation.from_matrix(rotations.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(*shape, 4)


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices of vectors (..., 3)."""
    w = np.asarray(w, dtype=np.float64)
    zero = np.zeros(w.shape[:-1])
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    return np.stack(
        [
            np.stack([zero, -wz, wy], -1),
            np.stack([wz, zero, -wx], -1),
            np.stack([-wy, wx, zero], -1),
        ],
        axis=-2,
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Exponential map from axis-angle vectors (..., 3) to rotation matrices."""
    w = np.asarray(w, dtype=np.float64)
    shape = w.shape[:-1]
    return Rotation.from_rotvec(w.reshape(-1, 3)).as_matrix().reshape(*shape, 3, 3)


def so3_log(rotations: np.ndarray) -> np.ndarray:
    """Axis-angle vectors of rotation matrices (..., 3, 3)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    shape = rotations.shape[:-2]
    return Rotation.from_matrix(rotations.reshape(-1, 3, 3)).as_rotvec().reshape(*shape, 3)


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation matrices (Frobenius) of (..., 3, 3) matrices."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    fix = np.ones(u.shape[:-1])
    fix[..., -1] = d
    return (u * fix[..., None, :]) @ vt


def slerp_matrices(r0: np.ndarray, r1: np.ndarray, u: float | np.ndarray) -> np.ndarray:
    """Geodesic interpolation r0 · exp(u · log(r0ᵀ r1)) of rotation batches."""
    delta = so3_log(np.swapaxes(r0, -1, -2) @ r1)
    u = np.asarray(u, dtype=np.float64)
    return r0 @ so3_exp(delta * u[..., None])


def geodesic_distance(r0: np.ndarray, r1: np.ndarray) -> np.ndarray:
    """Rotation angle of r0ᵀ r1 in radians."""
    return np.linalg.norm(so3_log(np.swapaxes(r0, -1, -2) @ r1), axis=-1)


def random_axes(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed unit vectors."""
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
