"""Pinhole cameras, rigid transforms and the rectified-stereo depth/disparity relation.

Conventions: right-handed camera frame with +z forward, +x right, +y down.
Pixel ``(u, v)`` has ``u`` along image columns and ``v`` along rows; the
centre of the top-left pixel is ``(0, 0)``.

Every function accepts either a single point / pixel (shape ``(3,)`` or
``(2,)``) or a stack of them (shape ``(..., 3)`` / ``(..., 2)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Allowed deviation of a rotation from orthonormality (and of its determinant from 1).
ORTHONORMAL_TOL = 1e-9


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class BehindCameraError(DomainError):
    """A point with z <= 0 was handed to the projection."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer pixel-centre coordinates ``(u, v)``, each of shape ``(H, W)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x' = rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise DomainError("rigid transform entries must be finite")
        if not (
            np.allclose(rot @ rot.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0)
            and abs(np.linalg.det(rot) - 1.0) <= ORTHONORMAL_TOL
        ):
            raise DomainError("rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, mat) -> RigidTransform:
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        """The 3x4 ``[R|T]`` matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def is_orthonormal(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r @ r.T, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class StereoRig:
    baseline: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if not self.baseline > 0:
            raise DomainError(f"baseline must be positive, got {self.baseline}")


def rotation_y(angle: float) -> np.ndarray:
    """Rotation about the camera's vertical axis (yaw), angle in radians."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def lift(x, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel(s) ``x`` at the given z-depth: ``depth * inverse(intrinsics) @ [u, v, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise DomainError("lift requires positive depth")
    u, v = x[..., 0], x[..., 1]
    lo_u, hi_u = -0.5, intr.width - 0.5
    lo_v, hi_v = -0.5, intr.height - 0.5
    if np.any((u < lo_u) | (u > hi_u) | (v < lo_v) | (v > hi_v)):
        raise DomainError("pixel outside the image bounds")
    return np.stack(
        [(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth * np.ones_like(u)],
        axis=-1,
    )


def transform_point(motion: RigidTransform, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return c @ motion.rotation.T + motion.translation


def project(intr: CameraIntrinsics, c) -> np.ndarray:
    """Perspective projection of camera-frame points through the intrinsics; raises if any point is not in front of the camera."""
    c = np.asarray(c, dtype=np.float64)
    z = c[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("cannot project a point with z <= 0")
    return np.stack([intr.fx * c[..., 0] / z + intr.cx, intr.fy * c[..., 1] / z + intr.cy], axis=-1)


def project_masked(intr: CameraIntrinsics, c) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection that flags instead of raising.

    Returns ``(pixels, in_front)``; pixels of points behind the camera are NaN.
    """
    c = np.asarray(c, dtype=np.float64)
    z = c[..., 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    px = np.stack([intr.fx * c[..., 0] / safe_z + intr.cx, intr.fy * c[..., 1] / safe_z + intr.cy], axis=-1)
    px[~in_front] = np.nan
    return px, in_front


def stereo_rig_transform(rig: StereoRig) -> RigidTransform:
    """Left-camera to right-camera transform of a rectified rig."""
    return RigidTransform.from_translation([-rig.baseline, 0.0, 0.0])


def depth_from_disparity(d, focal, baseline):
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DomainError("disparity must be positive")
    out = focal * baseline / d
    return float(out) if out.ndim == 0 else out


def disparity_from_depth(depth, focal, baseline):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise DomainError("depth must be positive")
    out = focal * baseline / depth
    return float(out) if out.ndim == 0 else out


def relative_pose(pose_i: RigidTransform, pose_j: RigidTransform) -> RigidTransform:
    """Camera-j-from-camera-i transform, given world-from-camera poses."""
    return pose_j.inverse() @ pose_i
