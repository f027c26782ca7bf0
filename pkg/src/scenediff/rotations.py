"""Rotation representations, conversions, and projection onto SO(3).

Rotations are carried through the generative pipeline as 9 real numbers (the
row-major rotation matrix), which is friendly to denoising in Euclidean
coordinates.  Conversions to and from unit quaternions and axis-angle vectors
are provided for data authoring and inspection.  ``project_rotation_9d`` maps
an arbitrary 9-vector to the nearest rotation matrix (Frobenius norm) and is
the finalisation step applied to sampled scenes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NINE = "nine"
QUAT = "quat"
AXIS_ANGLE = "axis_angle"

_KINDS = {NINE: 9, QUAT: 4, AXIS_ANGLE: 3}


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Rotation:
    """A rotation in one of three interchangeable representations.

    ``kind`` is one of ``"nine"`` (row-major 3x3 matrix flattened to 9),
    ``"quat"`` (unit quaternion, scalar first, nonnegative scalar part), or
    ``"axis_angle"`` (axis scaled by angle, angle in [0, pi]).
    """

    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown rotation kind: {self.kind!r}")
        arr = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if arr.shape[0] != _KINDS[self.kind]:
            raise ValueError(f"rotation kind {self.kind!r} needs {_KINDS[self.kind]} values, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("rotation values must be finite")
        object.__setattr__(self, "data", _readonly(arr))

    # -- constructors ------------------------------------------------------

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(NINE, np.eye(3).reshape(9))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        return cls(NINE, np.asarray(m, dtype=np.float64).reshape(9))

    @classmethod
    def from_quat(cls, q: np.ndarray) -> "Rotation":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero quaternion")
        q = q / n
        if q[0] < 0:
            q = -q
        return cls(QUAT, q)

    @classmethod
    def from_axis_angle(cls, v: np.ndarray) -> "Rotation":
        return cls(AXIS_ANGLE, _canonical_axis_angle(np.asarray(v, dtype=np.float64).reshape(3)))

    @classmethod
    def yaw(cls, angle: float) -> "Rotation":
        """Rotation about +z by ``angle`` radians."""
        c, s = np.cos(angle), np.sin(angle)
        return cls.from_matrix(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    # -- conversions -------------------------------------------------------

    def as_matrix(self) -> np.ndarray:
        """The 3x3 rotation matrix (row-major semantics throughout)."""
        if self.kind == NINE:
            return self.data.reshape(3, 3).copy()
        if self.kind == QUAT:
            return _quat_to_matrix(self.data)
        return _quat_to_matrix(_axis_angle_to_quat(self.data))

    def as_nine(self) -> np.ndarray:
        return self.as_matrix().reshape(9)

    def as_quat(self) -> np.ndarray:
        if self.kind == QUAT:
            return self.data.copy()
        if self.kind == AXIS_ANGLE:
            return _axis_angle_to_quat(self.data)
        return _matrix_to_quat(self.data.reshape(3, 3))

    def as_axis_angle(self) -> np.ndarray:
        if self.kind == AXIS_ANGLE:
            return self.data.copy()
        return _quat_to_axis_angle(self.as_quat())

    def convert(self, kind: str) -> "Rotation":
        """Re-express this rotation in another representation."""
        if kind == self.kind:
            return self
        if kind == NINE:
            return Rotation(NINE, self.as_nine())
        if kind == QUAT:
            return Rotation(QUAT, self.as_quat())
        if kind == AXIS_ANGLE:
            return Rotation(AXIS_ANGLE, self.as_axis_angle())
        raise ValueError(f"unknown rotation kind: {kind!r}")

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle in radians between two rotations."""
        rel = self.as_matrix().T @ other.as_matrix()
        c = (np.trace(rel) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(m)
    if t > 0:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([0.5 * r, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    half = 0.5 * angle
    q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
    if q[0] < 0:
        q = -q
    return q


def _quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    w = np.clip(q[0], -1.0, 1.0)
    vec = q[1:]
    n = np.linalg.norm(vec)
    angle = 2.0 * np.arctan2(n, w)
    if n < 1e-12 or angle < 1e-12:
        return np.zeros(3)
    # Canonical range (0, pi]; w >= 0 already guarantees angle <= pi.
    return (angle / n) * vec


def _canonical_axis_angle(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.zeros(3)
    # Wrap the angle into [0, pi], flipping the axis when needed.
    axis = v / angle
    angle = np.fmod(angle, 2.0 * np.pi)
    if angle > np.pi:
        angle = 2.0 * np.pi - angle
        axis = -axis
    return angle * axis


def project_rotation_9d(values: np.ndarray) -> np.ndarray:
    """Project an arbitrary 9-vector to the nearest rotation matrix.

    Uses the SVD projection: for ``M = U S V^T`` the closest matrix in
    Frobenius norm with determinant +1 is ``U diag(1, 1, det(U V^T)) V^T``.
    A rank-deficient input (at least two vanishing singular values) has no
    unique nearest rotation; the identity is returned and a warning logged.
    """
    m = np.asarray(values, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(m)):
        raise ValueError("rotation projection requires finite values")
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-12 * max(1.0, s[0]):
        logger.warning("rotation projection: rank-deficient input, falling back to identity")
        return np.eye(3)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:  # pragma: no cover - excluded by the rank check above
        d = 1.0
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return r


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Uniform random rotation (Haar measure) via normalised 4D Gaussians."""
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-9:  # pragma: no cover - probability ~0
        q = rng.normal(size=4)
    return Rotation.from_quat(q)
