"""Quaternion and rotation helpers, batch-first, w-component leading."""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions of shape (..., 4); near-zero norms map to identity."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = np.where(n > 1e-12, n, 1.0)
    out = q / safe
    return np.where(n > 1e-12, out, IDENTITY_QUAT)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = (q[..., i] for i in range(4))
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product p * q, broadcasting over leading dimensions."""
    pw, px, py, pz = (p[..., i] for i in range(4))
    qw, qx, qy, qz = (q[..., i] for i in range(4))
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_left_matrix(p: np.ndarray) -> np.ndarray:
    """4x4 matrix L with p * q == L @ q. Orthogonal when p is a unit quaternion."""
    pw, px, py, pz = (float(p[i]) for i in range(4))
    return np.array(
        [
            [pw, -px, -py, -pz],
            [px, pw, -pz, py],
            [py, pz, pw, -px],
            [pz, -py, px, pw],
        ]
    )


def quat_rotation_partials(q: np.ndarray) -> np.ndarray:
    """Partial derivatives dR/dq_j of `quat_to_matrix`, shape (..., 4, 3, 3).

    The formula is differentiated literally in the four components; callers
    working with normalized quaternions must chain the normalization Jacobian.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = (q[..., i] for i in range(4))
    zero = np.zeros_like(w)
    P = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    # dR/dw
    P[..., 0, 0, 0] = zero
    P[..., 0, 0, 1] = -z
    P[..., 0, 0, 2] = y
    P[..., 0, 1, 0] = z
    P[..., 0, 1, 1] = zero
    P[..., 0, 1, 2] = -x
    P[..., 0, 2, 0] = -y
    P[..., 0, 2, 1] = x
    P[..., 0, 2, 2] = zero
    # dR/dx
    P[..., 1, 0, 0] = zero
    P[..., 1, 0, 1] = y
    P[..., 1, 0, 2] = z
    P[..., 1, 1, 0] = y
    P[..., 1, 1, 1] = -2.0 * x
    P[..., 1, 1, 2] = -w
    P[..., 1, 2, 0] = z
    P[..., 1, 2, 1] = w
    P[..., 1, 2, 2] = -2.0 * x
    # dR/dy
    P[..., 2, 0, 0] = -2.0 * y
    P[..., 2, 0, 1] = x
    P[..., 2, 0, 2] = w
    P[..., 2, 1, 0] = x
    P[..., 2, 1, 1] = zero
    P[..., 2, 1, 2] = z
    P[..., 2, 2, 0] = -w
    P[..., 2, 2, 1] = z
    P[..., 2, 2, 2] = -2.0 * y
    # dR/dz
    P[..., 3, 0, 0] = -2.0 * z
    P[..., 3, 0, 1] = -w
    P[..., 3, 0, 2] = x
    P[..., 3, 1, 0] = w
    P[..., 3, 1, 1] = -2.0 * z
    P[..., 3, 1, 2] = y
    P[..., 3, 2, 0] = x
    P[..., 3, 2, 1] = y
    P[..., 3, 2, 2] = zero
    return 2.0 * P


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    c = (np.trace(Ra.T @ Rb) - 1.0) * 0.5
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def smoothstep(t: np.ndarray) -> np.ndarray:
    """Cubic smoothstep on [0, 1], clamped outside."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)
