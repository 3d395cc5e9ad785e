"""Quaternion and pose arithmetic.

Quaternions are numpy arrays ordered ``(w, x, y, z)``; positions are length-3
arrays in meters. Every function accepts stacked inputs of shape ``(..., 4)``
or ``(..., 3)`` and operates on the trailing axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonOrthogonalRotation, ZeroNormQuaternion

NORM_EPS = 1e-12
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion needs 4 components, got shape {q.shape}")
    return q


def quat_normalize(q) -> np.ndarray:
    q = _as_quat(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= NORM_EPS):
        raise ZeroNormQuaternion(f"cannot normalize quaternion with norm {n.min():.3g}")
    return q / n


def quat_conjugate(q) -> np.ndarray:
    q = _as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    a = _as_quat(a)
    b = _as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def canonicalize_hemisphere(q) -> np.ndarray:
    """Pick the representative with ``w > 0``.

    When ``w == 0`` the sign is chosen so that the first nonzero vector
    component is positive, which keeps the canonical form deterministic.
    """
    q = _as_quat(q)
    flat = q.reshape(-1, 4)
    sign = np.ones(len(flat))
    for i, row in enumerate(flat):
        if row[0] < 0:
            sign[i] = -1.0
        elif row[0] == 0:
            nz = np.flatnonzero(row[1:])
            if nz.size and row[1 + nz[0]] < 0:
                sign[i] = -1.0
    return (flat * sign[:, None]).reshape(q.shape)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def nearest_rotation(R) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def quat_from_matrix(R, ortho_tol: float = 1e-3) -> np.ndarray:
    """Canonical unit quaternion of a rotation matrix.

    Matrices whose ``RᵀR`` is within ``ortho_tol`` of identity are snapped to
    the nearest rotation first; anything worse raises NonOrthogonalRotation.
    """
    R = np.asarray(R, dtype=np.float64)
    err = np.abs(R.T @ R - np.eye(3)).max()
    if not np.isfinite(err) or err > ortho_tol or np.linalg.det(R) <= 0:
        raise NonOrthogonalRotation(f"rotation block is not orthonormal (|RᵀR - I| = {err:.3g})")
    R = nearest_rotation(R)
    # Shepperd's method: branch on the largest diagonal term for stability
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonicalize_hemisphere(quat_normalize(q))


@dataclass(frozen=True)
class Pose:
    """Camera pose: world position plus unit orientation quaternion."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("position must be finite")
        q = canonicalize_hemisphere(quat_normalize(np.asarray(self.orientation, dtype=np.float64).reshape(4)))
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), IDENTITY)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.orientation)
        T[:3, 3] = self.position
        return T


@dataclass(frozen=True)
class RelativePose:
    x_rel: np.ndarray
    q_rel: np.ndarray


def relative_pose(p: Pose, p_ref: Pose) -> RelativePose:
    """Relative pose of ``p`` with respect to ``p_ref``.

    The position part is the plain world-frame difference ``x - x_ref``; the
    orientation part is ``conj(q_ref) ⊗ q``, canonicalized.
    """
    x_rel = p.position - p_ref.position
    q_rel = quat_multiply(quat_conjugate(p_ref.orientation), p.orientation)
    return RelativePose(x_rel, canonicalize_hemisphere(quat_normalize(q_rel)))


def angular_error_deg(q1, q2) -> float | np.ndarray:
    """Geodesic angle between two orientations, in degrees (0 to 180)."""
    d = np.abs(np.sum(_as_quat(q1) * _as_quat(q2), axis=-1))
    return np.degrees(2.0 * np.arccos(np.minimum(1.0, d)))


def position_error_m(x1, x2) -> float | np.ndarray:
    diff = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return np.linalg.norm(diff, axis=-1)
