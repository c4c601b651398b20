"""SO(3)/SE(3) arithmetic: axis-angle conversion, composition, sampling.

Conventions used throughout the toolkit:

* rotation vectors are length-3 arrays (axis * angle, radians), canonical
  representative has angle in [0, pi];
* points are column vectors, a transform maps ``p -> R @ p + t``;
* per-axis random rotations draw roll (about x), pitch (about y) and
  yaw (about z) independently and compose as ``R = Rz @ Ry @ Rx``
  (fixed-axis XYZ), because per-axis errors are reported in that frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonOrthonormalError, ValidationError

# Below this angle Rodrigues' closed form degenerates to 0/0; switch to the
# second-order series of the same expansion.
_SMALL_ANGLE = 1e-8
# Above this angle the skew part of R loses the axis; switch to the
# symmetric-part extraction.
_NEAR_PI = 3.0 * math.pi / 4.0

_ORTHO_TOL = 1e-6


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,):
        raise ValidationError(f"{name} must be a length-3 vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite, got {arr}")
    return arr


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_residual(matrix: np.ndarray) -> float:
    """Max deviation of ``matrix`` from SO(3): orthonormality plus det-1."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got shape {matrix.shape}")
    ortho = np.max(np.abs(matrix.T @ matrix - np.eye(3)))
    return float(max(ortho, abs(np.linalg.det(matrix) - 1.0)))


def check_rotation(matrix: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    residual = so3_residual(matrix)
    if residual > tol:
        raise NonOrthonormalError(
            f"matrix is not in SO(3): residual {residual:.3e} exceeds {tol:.1e}"
        )
    return matrix


def rotvec_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector to rotation matrix.

    Exact identity for the zero vector; below 1e-8 rad the series form
    ``I + K + K^2/2`` is used (K the skew matrix of the unnormalized vector).
    """
    r = _as_vec3(rotvec, "rotvec")
    theta = float(np.linalg.norm(r))
    if theta == 0.0:
        return np.eye(3)
    k = _skew(r)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    axis_k = k / theta
    return np.eye(3) + math.sin(theta) * axis_k + (1.0 - math.cos(theta)) * (axis_k @ axis_k)


def nearest_rotation(matrix) -> np.ndarray:
    """Project a near-rotation onto SO(3) (orthogonal Procrustes via SVD)."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got shape {matrix.shape}")
    u, _, vt = np.linalg.svd(matrix)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u = u.copy()
        u[:, 2] = -u[:, 2]
        rot = u @ vt
    return rot


def matrix_to_rotvec(matrix) -> np.ndarray:
    """Inverse of :func:`rotvec_to_matrix`, canonical angle in [0, pi].

    Rejects input whose SO(3) residual exceeds 1e-6.  At angles near pi the
    axis comes from the symmetric part of R; the sign ambiguity at exactly pi
    is resolved by making the largest-magnitude axis component positive.
    """
    return _rotvec_from_checked(check_rotation(matrix))


def _rotvec_from_checked(rot: np.ndarray) -> np.ndarray:
    # vee of the skew part: sin(theta) * axis
    w = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    s = float(np.linalg.norm(w))
    c = max(-1.0, min(1.0, (float(np.trace(rot)) - 1.0) / 2.0))
    theta = math.atan2(s, c)
    if theta < _SMALL_ANGLE:
        return w
    if theta <= _NEAR_PI:
        return w * (theta / s)
    # Near pi: aa^T = (sym(R) - c I) / (1 - c), exact for any angle > 0.
    outer = ((rot + rot.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(outer)))
    axis = outer[:, i] / math.sqrt(max(outer[i, i], 1e-300))
    axis = axis / np.linalg.norm(axis)
    if s > 1e-9:
        if float(np.dot(w, axis)) < 0.0:
            axis = -axis
    elif axis[int(np.argmax(np.abs(axis)))] < 0.0:
        axis = -axis
    return theta * axis


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis XYZ composition ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def matrix_to_euler(matrix) -> tuple[float, float, float]:
    """Decompose into (roll, pitch, yaw) inverting :func:`euler_to_matrix`.

    At the pitch = +-90 deg singularity roll is set to 0 by convention.
    """
    rot = check_rotation(matrix)
    sy = math.hypot(rot[0, 0], rot[1, 0])
    pitch = math.atan2(-rot[2, 0], sy)
    if sy < 1e-9:
        roll = 0.0
        yaw = math.atan2(-rot[0, 1], rot[1, 1])
    else:
        roll = math.atan2(rot[2, 1], rot[2, 2])
        yaw = math.atan2(rot[1, 0], rot[0, 0])
    return roll, pitch, yaw


class RigidTransform:
    """An SE(3) pose: 3x3 rotation plus translation, both immutable.

    The rotation must satisfy ``R^T R = I`` and ``det R = 1`` within 1e-9.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        rotation = np.array(rotation, dtype=float)
        translation = _as_vec3(translation, "translation").copy()
        residual = so3_residual(rotation)
        if residual > 1e-9:
            raise NonOrthonormalError(
                f"rotation is not in SO(3): residual {residual:.3e} exceeds 1e-9"
            )
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "RigidTransform":
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_translation(cls, tx: float, ty: float, tz: float) -> "RigidTransform":
        return cls(np.eye(3), (tx, ty, tz))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape == (4, 4):
            bottom = matrix[3]
            if np.max(np.abs(bottom - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
                raise ValidationError("homogeneous matrix must end in row (0,0,0,1)")
            matrix = matrix[:3]
        if matrix.shape != (3, 4):
            raise ValidationError(f"expected 3x4 or 4x4 matrix, got shape {matrix.shape}")
        return cls(matrix[:, :3], matrix[:, 3])

    @classmethod
    def from_kitti_flat(cls, values) -> "RigidTransform":
        """12 row-major numbers forming the 3x4 [R|t] block.

        Accepts the limited precision of calibration text files: the rotation
        may deviate from SO(3) by up to 1e-4 and is snapped to the nearest
        rotation; larger residuals are rejected.
        """
        arr = np.asarray(values, dtype=float)
        if arr.shape != (12,):
            raise ValidationError(f"expected 12 values, got shape {arr.shape}")
        block = arr.reshape(3, 4)
        rot = check_rotation(block[:, :3], tol=1e-4)
        return cls(nearest_rotation(rot), block[:, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def rotvec(self) -> np.ndarray:
        return matrix_to_rotvec(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of points through the transform."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def to_json_dict(self) -> dict:
        return {
            "rotvec": [float(v) for v in self.rotvec()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RigidTransform":
        try:
            rotvec = obj["rotvec"]
            translation = obj["translation"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"transform JSON needs rotvec/translation: {obj!r}") from exc
        return cls.from_rotvec(rotvec, translation)

    def allclose(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return bool(
            np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )

    def __repr__(self) -> str:
        rv = self.rotvec()
        t = self.translation
        return (
            f"RigidTransform(rotvec=[{rv[0]:.6g}, {rv[1]:.6g}, {rv[2]:.6g}], "
            f"t=[{t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}])"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a`` (homogeneous product a*b)."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rot_t = t.rotation.T
    return RigidTransform(rot_t, -(rot_t @ t.translation))


@dataclass(frozen=True)
class MiscalibRange:
    """Per-axis perturbation bounds: rotation in radians, translation in meters."""

    rot_max: float
    trans_max: float

    def __post_init__(self):
        if not (self.rot_max >= 0.0 and self.trans_max >= 0.0):
            raise ValidationError(
                f"miscalibration bounds must be >= 0, got ({self.rot_max}, {self.trans_max})"
            )


def sample_random_transform(bounds: MiscalibRange, seed: int) -> RigidTransform:
    """Draw a random perturbation, deterministic per seed.

    Draw order is fixed: roll, pitch, yaw uniform in [-rot_max, +rot_max],
    then tx, ty, tz uniform in [-trans_max, +trans_max].
    """
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-bounds.rot_max, bounds.rot_max, size=3)
    trans = rng.uniform(-bounds.trans_max, bounds.trans_max, size=3)
    return RigidTransform(euler_to_matrix(*angles), trans)


def geodesic_rotation_error(r_pred, r_gt) -> float:
    """Relative rotation angle between two rotation matrices, in radians.

    Equals ``(1/sqrt(2)) * ||log(R_pred^T R_gt)||_F``, computed through the
    axis-angle extraction (equivalent on SO(3)).
    """
    r_pred = check_rotation(r_pred)
    r_gt = check_rotation(r_gt)
    return float(np.linalg.norm(_rotvec_from_checked(r_pred.T @ r_gt)))
