"""Domain types and geometry primitives.

Conventions used throughout the package:

* A :class:`Pose` maps camera coordinates to world coordinates,
  ``X_w = R @ X_c + t``.
* Camera frames follow the pinhole convention: x right, y down, z forward.
* Pixel ``(u, v)`` has its centre at image coordinates ``(u, v)``; ``u`` is
  the column and ``v`` the row.
* Quaternions are stored as ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from .errors import InvalidDepthError, NonProjectableError
from .registry import LabelRegistry

_ORTHO_TOL = 1e-6
_QUAT_TOL = 1e-6
# Points closer to the camera plane than this cannot be projected.
_MIN_DEPTH = 1e-9


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

def hat(w: NDArray) -> NDArray:
    """Skew-symmetric matrix such that ``hat(w) @ v == cross(w, v)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: NDArray) -> NDArray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R: NDArray) -> NDArray:
    return Rotation.from_matrix(R).as_rotvec()


def rotation_angle(R: NDArray) -> float:
    """Angle of a rotation matrix in radians."""
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    return float(np.arccos(c))


def quat_to_rotmat(q: NDArray) -> NDArray:
    """Rotation matrices for unit quaternions ``(..., 4)`` in ``(w, x, y, z)`` order."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_jacobian(q: NDArray) -> NDArray:
    """Partial derivatives ``dR/dq_k`` of :func:`quat_to_rotmat`, shape ``(..., 4, 3, 3)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    d = np.empty(q.shape[:-1] + (4, 3, 3))
    # d/dw
    d[..., 0, :, :] = np.stack([
        np.stack([zero, -2 * z, 2 * y], -1),
        np.stack([2 * z, zero, -2 * x], -1),
        np.stack([-2 * y, 2 * x, zero], -1)], -2)
    # d/dx
    d[..., 1, :, :] = np.stack([
        np.stack([zero, 2 * y, 2 * z], -1),
        np.stack([2 * y, -4 * x, -2 * w], -1),
        np.stack([2 * z, 2 * w, -4 * x], -1)], -2)
    # d/dy
    d[..., 2, :, :] = np.stack([
        np.stack([-4 * y, 2 * x, 2 * w], -1),
        np.stack([2 * x, zero, 2 * z], -1),
        np.stack([-2 * w, 2 * z, -4 * y], -1)], -2)
    # d/dz
    d[..., 3, :, :] = np.stack([
        np.stack([-4 * z, -2 * w, 2 * x], -1),
        np.stack([2 * w, -4 * z, 2 * y], -1),
        np.stack([2 * x, 2 * y, zero], -1)], -2)
    return d


def rotmat_to_quat(R: NDArray) -> NDArray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def covariance_from_factors(scale: NDArray, quat: NDArray) -> NDArray:
    """``R diag(scale^2) R^T`` for one or many splats."""
    q = np.asarray(quat, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    M = quat_to_rotmat(q) * np.asarray(scale, dtype=float)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Splat:
    """One 3D Gaussian of the map."""

    center: NDArray
    scale: NDArray
    rotation: NDArray
    color: NDArray
    opacity: float = 0.5
    object_id: int | None = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        color = np.clip(np.asarray(self.color, dtype=float).reshape(3), 0.0, 1.0)
        if not np.all(scale > 0):
            raise ValueError(f"scale must be strictly positive, got {scale}")
        if abs(np.linalg.norm(rotation) - 1.0) > _QUAT_TOL:
            raise ValueError("rotation quaternion must have unit norm")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must lie in (0, 1), got {self.opacity}")
        if self.object_id is not None and self.object_id < 0:
            raise ValueError("object_id must be non-negative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "opacity", float(self.opacity))

    @property
    def covariance(self) -> NDArray:
        return covariance_from_factors(self.scale, self.rotation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> NDArray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: NDArray = field(default_factory=lambda: np.eye(3))
    translation: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: NDArray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rt12(cls, values) -> Pose:
        """Build from 12 numbers: row-major rotation followed by translation."""
        v = np.asarray(values, dtype=float).reshape(12)
        return cls(orthonormalize(v[:9].reshape(3, 3)), v[9:])

    def to_rt12(self) -> NDArray:
        return np.concatenate([self.rotation.reshape(9), self.translation])

    def matrix(self) -> NDArray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def retract(self, delta: NDArray) -> Pose:
        """Apply a tangent update ``(rotation vector, translation)``.

        The rotation part perturbs the camera in its own frame,
        ``R' = R exp(hat(w))``; the translation is added in world frame.
        """
        delta = np.asarray(delta, dtype=float)
        R = orthonormalize(self.rotation @ so3_exp(delta[:3]))
        return Pose(R, self.translation + delta[3:])

    def transform(self, points: NDArray) -> NDArray:
        """Camera -> world for ``(..., 3)`` points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def transform_inverse(self, points: NDArray) -> NDArray:
        """World -> camera for ``(..., 3)`` points."""
        return (np.asarray(points) - self.translation) @ self.rotation


def orthonormalize(R: NDArray) -> NDArray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def translation_pose(x: float, y: float, z: float) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=float))


@dataclass
class Frame:
    """One RGB-D observation."""

    index: int
    rgb: NDArray
    depth: NDArray
    intrinsics: CameraIntrinsics
    pose: Pose | None = None
    is_keyframe: bool = False

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        h, w = self.intrinsics.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match intrinsics {(h, w, 3)}")
        if self.depth.shape != (h, w):
            raise ValueError(f"depth shape {self.depth.shape} does not match intrinsics {(h, w)}")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth values must be finite and non-negative")


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def project(point_world: NDArray, pose: Pose, intrinsics: CameraIntrinsics) -> tuple[float, float, float]:
    """Pixel coordinates and camera depth of a world point."""
    p = pose.transform_inverse(np.asarray(point_world, dtype=float))
    if p[2] <= _MIN_DEPTH:
        raise NonProjectableError(f"point {tuple(point_world)} is behind the camera (z={p[2]:.3g})")
    u = intrinsics.fx * p[0] / p[2] + intrinsics.cx
    v = intrinsics.fy * p[1] / p[2] + intrinsics.cy
    return float(u), float(v), float(p[2])


def project_points(points_world: NDArray, pose: Pose, intrinsics: CameraIntrinsics):
    """Vectorised :func:`project`. Points behind the camera get ``nan`` pixels."""
    p = pose.transform_inverse(np.asarray(points_world, dtype=float).reshape(-1, 3))
    z = p[:, 2]
    ok = z > _MIN_DEPTH
    zs = np.where(ok, z, np.nan)
    u = intrinsics.fx * p[:, 0] / zs + intrinsics.cx
    v = intrinsics.fy * p[:, 1] / zs + intrinsics.cy
    return u, v, z


def back_project(u: float, v: float, d: float, pose: Pose, intrinsics: CameraIntrinsics) -> NDArray:
    """Lift pixel ``(u, v)`` at depth ``d`` to a world point."""
    if not d > 0:
        raise InvalidDepthError(f"depth must be positive, got {d}")
    xc = d * np.array([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0])
    return pose.rotation @ xc + pose.translation


def back_project_pixels(us: NDArray, vs: NDArray, ds: NDArray, pose: Pose, intrinsics: CameraIntrinsics) -> NDArray:
    """Vectorised :func:`back_project`; callers filter invalid depths first."""
    ds = np.asarray(ds, dtype=float)
    if np.any(ds <= 0):
        raise InvalidDepthError("all depths must be positive")
    xc = np.stack([
        (np.asarray(us, dtype=float) - intrinsics.cx) / intrinsics.fx * ds,
        (np.asarray(vs, dtype=float) - intrinsics.cy) / intrinsics.fy * ds,
        ds,
    ], axis=-1)
    return pose.transform(xc)


def evaluate_gaussian(splat: Splat, x: NDArray) -> NDArray:
    """Color-weighted Gaussian falloff of ``splat`` at world point ``x``."""
    r = np.asarray(x, dtype=float) - splat.center
    # Whiten in the splat's own frame instead of inverting the covariance.
    local = quat_to_rotmat(splat.rotation).T @ r / splat.scale
    return splat.color * np.exp(-0.5 * float(local @ local))


# --------------------------------------------------------------------------
# map
# --------------------------------------------------------------------------

UNTAGGED = -1


class SplatMap:
    """Ordered splat collection stored as parallel arrays, plus keyframe poses.

    ``object_ids`` uses ``-1`` for untagged splats. ``tag_confidence`` holds
    the confidence of the segmentation record that set each tag.
    """

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.scales = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.colors = np.zeros((0, 3))
        self.opacities = np.zeros(0)
        self.object_ids = np.zeros(0, dtype=np.int64)
        self.tag_confidence = np.zeros(0)
        self.keyframes: dict[int, Pose] = {}
        self.next_object_id = 0
        self.intrinsics: CameraIntrinsics | None = None
        self.registry = LabelRegistry()

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Splat:
        oid = int(self.object_ids[i])
        return Splat(self.means[i], self.scales[i], self.quats[i], self.colors[i],
                     float(self.opacities[i]), None if oid < 0 else oid)

    @property
    def splats(self) -> list[Splat]:
        return [self[i] for i in range(len(self))]

    def append(self, splat: Splat) -> int:
        self.extend(splat.center[None], splat.scale[None], splat.rotation[None],
                    splat.color[None], np.array([splat.opacity]),
                    np.array([UNTAGGED if splat.object_id is None else splat.object_id]))
        return len(self) - 1

    def extend(self, means, scales, quats, colors, opacities, object_ids=None, tag_confidence=None) -> None:
        n = len(means)
        if object_ids is None:
            object_ids = np.full(n, UNTAGGED, dtype=np.int64)
        if tag_confidence is None:
            tag_confidence = np.zeros(n)
        self.means = np.concatenate([self.means, np.asarray(means, dtype=float).reshape(n, 3)])
        self.scales = np.concatenate([self.scales, np.asarray(scales, dtype=float).reshape(n, 3)])
        self.quats = np.concatenate([self.quats, np.asarray(quats, dtype=float).reshape(n, 4)])
        self.colors = np.concatenate([self.colors, np.clip(np.asarray(colors, dtype=float).reshape(n, 3), 0, 1)])
        self.opacities = np.concatenate([self.opacities, np.asarray(opacities, dtype=float).reshape(n)])
        self.object_ids = np.concatenate([self.object_ids, np.asarray(object_ids, dtype=np.int64).reshape(n)])
        self.tag_confidence = np.concatenate([self.tag_confidence, np.asarray(tag_confidence, dtype=float).reshape(n)])

    @classmethod
    def from_splats(cls, splats) -> SplatMap:
        m = cls()
        for s in splats:
            m.append(s)
        return m

    def copy(self) -> SplatMap:
        m = SplatMap()
        for name in ("means", "scales", "quats", "colors", "opacities", "object_ids", "tag_confidence"):
            setattr(m, name, getattr(self, name).copy())
        m.keyframes = dict(self.keyframes)
        m.next_object_id = self.next_object_id
        m.intrinsics = self.intrinsics
        m.registry = self.registry.copy()
        return m

    def add_keyframe(self, index: int, pose: Pose) -> None:
        if self.keyframes and index <= max(self.keyframes):
            raise ValueError(f"keyframe index {index} is not greater than {max(self.keyframes)}")
        self.keyframes[index] = pose

    def mint_object_id(self) -> int:
        oid = self.next_object_id
        self.next_object_id += 1
        return oid

    def enforce_invariants(self, min_scale: float = 1e-4, min_opacity: float = 1e-3, max_opacity: float = 0.999) -> None:
        """Project parameters back onto the valid splat domain in place."""
        norms = np.linalg.norm(self.quats, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
        self.quats[bad] = (1.0, 0.0, 0.0, 0.0)
        norms[bad] = 1.0
        self.quats /= norms
        np.maximum(self.scales, min_scale, out=self.scales)
        np.clip(self.opacities, min_opacity, max_opacity, out=self.opacities)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    def bounds(self) -> tuple[NDArray, NDArray] | None:
        if len(self) == 0:
            return None
        return self.means.min(axis=0), self.means.max(axis=0)
