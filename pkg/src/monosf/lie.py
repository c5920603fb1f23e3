"""SE(3) group and se(3) algebra operations.

Twists are 6-vectors ordered ``(v, w)``: translational part first, rotation
(axis-angle, radians) second. Rotations are stored as unit quaternions
``(w, x, y, z)``. Every array function broadcasts over leading axes so the
same code serves single transforms and dense per-pixel fields.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
PI_MARGIN = 1e-6


class SE3Error(ValueError):
    """Invalid argument to an SE(3) operation."""


class NearSingularRotation(SE3Error):
    """Rotation angle too close to pi for a unique logarithm."""


def _matvec(mats, vecs):
    """Batched ``mats @ vecs`` for (..., 3, 3) and (..., 3) arrays."""
    return (mats * vecs[..., None, :]).sum(axis=-1)


def skew(w):
    w = np.asarray(w, dtype=float)
    z = np.zeros_like(w[..., 0])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def _rodrigues_coeffs(theta):
    """Return ``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t-sin t)/t^3``."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def quat_from_rotvec(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    # sin(t/2)/t
    s = np.where(small, 0.5 - theta * theta / 48.0, np.sin(t / 2.0) / t)
    return np.concatenate([np.cos(theta / 2.0)[..., None], s[..., None] * w], axis=-1)


def quat_to_rotvec(q):
    """Axis-angle vector of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    vec = q[..., 1:]
    n = np.linalg.norm(vec, axis=-1)
    qw = q[..., 0]
    small = n < 0.5 * SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, qw, 1.0)
    factor = np.where(
        small,
        2.0 / safe_w * (1.0 - n * n / (3.0 * safe_w * safe_w)),
        2.0 * np.arctan2(n, qw) / safe_n,
    )
    return factor[..., None] * vec


def quat_angle(q):
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
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


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_quat(R):
    """Shepperd's method; picks the numerically largest pivot per element."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    pivot = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    q = np.empty((R.shape[0], 4))
    for k in range(4):
        sel = pivot == k
        if not np.any(sel):
            continue
        m = R[sel]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack(
                [0.25 * s, (m[:, 2, 1] - m[:, 1, 2]) / s, (m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 1, 0] - m[:, 0, 1]) / s],
                axis=1,
            )
        else:
            i = k - 1
            j, l = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + m[:, i, i] - m[:, j, j] - m[:, l, l])
            out = np.empty((m.shape[0], 4))
            out[:, 0] = (m[:, l, j] - m[:, j, l]) / s
            out[:, 1 + i] = 0.25 * s
            out[:, 1 + j] = (m[:, j, i] + m[:, i, j]) / s
            out[:, 1 + l] = (m[:, l, i] + m[:, i, l]) / s
            q[sel] = out
    q = np.where(q[:, :1] < 0.0, -q, q)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(shape + (4,))


def left_jacobian(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _rodrigues_coeffs(theta)
    W = skew(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + b[..., None, None] * W + c[..., None, None] * (W @ W)


def left_jacobian_inv(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    half = t / 2.0
    d = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (t * t),
    )
    W = skew(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye - 0.5 * W + d[..., None, None] * (W @ W)


def exp_map(xi):
    """Twists ``(..., 6)`` to ``(quaternions (..., 4), translations (..., 3))``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 6:
        raise SE3Error(f"twist must have 6 components, got shape {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise SE3Error("twist contains non-finite values")
    v, w = xi[..., :3], xi[..., 3:]
    t = _matvec(left_jacobian(w), v)
    return quat_from_rotvec(w), t


def log_map(q, t, check=True):
    """Inverse of :func:`exp_map`.

    With ``check`` the call raises :class:`NearSingularRotation` when any
    angle is within ``PI_MARGIN`` of pi; otherwise such entries are returned
    as computed and callers are expected to mask them via :func:`near_pi`.
    """
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    if check and np.any(near_pi(q)):
        raise NearSingularRotation("rotation angle within 1e-6 of pi; logarithm is not unique")
    w = quat_to_rotvec(q)
    v = _matvec(left_jacobian_inv(w), t)
    return np.concatenate([v, w], axis=-1)


def near_pi(q):
    return quat_angle(q) > np.pi - PI_MARGIN


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise SE3Error("transform contains non-finite values")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise SE3Error(f"rotation quaternion is not unit length (norm {n})")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, t):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        if M.shape not in ((4, 4), (3, 4)):
            raise SE3Error(f"expected a 3x4 or 4x4 matrix, got {M.shape}")
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix
        M[:3, 3] = self.translation
        return M

    def angle(self):
        return float(quat_angle(self.rotation))

    def compose(self, other):
        q = quat_multiply(self.rotation, other.rotation)
        q /= np.linalg.norm(q)
        t = self.rotation_matrix @ other.translation + self.translation
        return RigidTransform(q, t)

    def inverse(self):
        qi = quat_conjugate(self.rotation)
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def act(self, p):
        p = np.asarray(p, dtype=float)
        return p @ self.rotation_matrix.T + self.translation

    def __matmul__(self, other):
        return self.compose(other)

    def allclose(self, other, atol=1e-9):
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0.0))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation!r}, translation={self.translation!r})"


def exp(xi):
    xi = np.asarray(xi, dtype=float).reshape(6)
    q, t = exp_map(xi)
    return RigidTransform(q, t)


def log(T):
    return log_map(T.rotation, T.translation)


def compose(A, B):
    return A.compose(B)


def inverse(T):
    return T.inverse()


def act(T, p):
    return T.act(p)
