"""Rigid transforms, rotation utilities and small factorisations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NotARotation, NotPositiveDefinite, Singular

ROTATION_TOL = 1e-9


def _frozen(a, shape):
    arr = np.array(a, dtype=float, copy=True).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation mapping ``p -> R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_row(cls, values) -> "RigidTransform":
        """Build from 12 numbers: row-major rotation followed by translation."""
        v = np.asarray(values, dtype=float).ravel()
        if v.size != 12:
            raise ValueError(f"expected 12 numbers, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation])

    def is_valid(self, tol: float = ROTATION_TOL) -> bool:
        return is_rotation(self.rotation, tol)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self):
        return (
            f"RigidTransform(angle={rotation_angle_deg(self.rotation):.6g}deg, "
            f"t={np.array2string(self.translation, precision=6)})"
        )


def is_rotation(m, tol: float = ROTATION_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    ortho = np.max(np.abs(m.T @ m - np.eye(3)))
    return bool(ortho <= tol and abs(np.linalg.det(m) - 1.0) <= tol)


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def axis_angle_to_matrix(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues' formula; ``axis`` need not be normalised."""
    k = np.asarray(axis, dtype=float)
    n = np.linalg.norm(k)
    if n == 0.0 or angle_rad == 0.0:
        return np.eye(3)
    k = k / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * (K @ K)


def matrix_to_axis_angle(r) -> tuple[np.ndarray, float]:
    """Inverse of :func:`axis_angle_to_matrix` for angles in [0, pi]."""
    r = np.asarray(r, dtype=float)
    angle = rotation_angle(r)
    if angle < 1e-12:
        return np.array([0.0, 0.0, 1.0]), 0.0
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; read the axis off R + I
        b = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(b)))
        axis = b[:, i] / np.sqrt(max(b[i, i], 1e-300))
        return axis / np.linalg.norm(axis), float(angle)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis / (2.0 * np.sin(angle)), float(angle)


def rotation_angle(r) -> float:
    """Geodesic angle of a rotation matrix in radians.

    atan2 of (2 sin, 2 cos) keeps full precision near 0 and pi, where arccos of
    the trace does not.
    """
    r = np.asarray(r, dtype=float)
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(np.linalg.norm(v), np.trace(r) - 1.0))


def rotation_angle_deg(r) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    return float(np.degrees(rotation_angle(r)))


def cholesky_lower(sigma) -> np.ndarray:
    """Lower-triangular ``B`` with ``B @ B.T == sigma`` for a 3x3 SPD matrix.

    Written out explicitly so that a non-positive pivot raises
    :class:`NotPositiveDefinite` instead of returning NaNs.
    """
    a = np.asarray(sigma, dtype=float)
    if a.shape != (3, 3):
        raise ValueError("sigma must be 3x3")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise NotPositiveDefinite("sigma is not symmetric")
    b = np.zeros((3, 3))
    for j in range(3):
        pivot = a[j, j] - b[j, :j] @ b[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefinite(f"pivot {j} is {pivot!r}")
        b[j, j] = np.sqrt(pivot)
        for i in range(j + 1, 3):
            b[i, j] = (a[i, j] - b[i, :j] @ b[j, :j]) / b[j, j]
    return b


def whitening_factor(sigma) -> np.ndarray:
    """Return ``W`` with ``||W @ r||^2 == r^T sigma^{-1} r``.

    ``W = B.T`` where ``B`` is the lower Cholesky factor of ``sigma^{-1}``.
    """
    a = np.asarray(sigma, dtype=float)
    inv = np.linalg.inv(a)
    inv = 0.5 * (inv + inv.T)
    return cholesky_lower(inv).T


def project_to_so3(m) -> np.ndarray:
    """Nearest rotation to ``m`` in Frobenius norm (special orthogonal polar factor)."""
    m = np.asarray(m, dtype=float)
    u, s, vt = np.linalg.svd(m)
    if s[-1] < 1e-12:
        raise Singular(f"smallest singular value {s[-1]:.3g}")
    d = np.sign(np.linalg.det(u @ vt))
    if d < 0:
        # flip the direction paired with the least singular value
        u = u.copy()
        u[:, -1] *= -1.0
    return u @ vt


def convert_prime_pose(r_prime, t_prime, tol: float = 1e-6) -> RigidTransform:
    """Swap pose direction: given model->sensor ``(R', t')`` return sensor->model.

    ``R = R'^T`` and ``t = -R'^T t'``. The map is its own inverse.
    """
    r_prime = np.asarray(r_prime, dtype=float)
    if not is_rotation(r_prime, tol):
        raise NotARotation("r_prime is not a rotation; call project_to_so3 first")
    rt = r_prime.T
    return RigidTransform(rt, -rt @ np.asarray(t_prime, dtype=float))


def random_rigid_transform(seed: int, max_angle_deg: float, max_translation: float) -> RigidTransform:
    """Random pose with axis uniform on the sphere, angle uniform in [0, max]
    and translation uniform in the ball of radius ``max_translation``."""
    if not 0.0 <= max_angle_deg <= 180.0:
        raise ValueError("max_angle_deg must lie in [0, 180]")
    if max_translation < 0:
        raise ValueError("max_translation must be >= 0")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(max_angle_deg) * rng.uniform()
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = max_translation * rng.uniform() ** (1.0 / 3.0)
    return RigidTransform(axis_angle_to_matrix(axis, angle), radius * direction)
