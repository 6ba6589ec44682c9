"""Camera model, region-of-interest voxel grid, and image-voxel association."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError

UNKNOWN = -1  # label sentinel for voxels excluded from losses and metrics

EPS_DEPTH = 1e-6  # behind-camera guard in meters


class _Sentinel:
    def __init__(self, name: str):
        self._name = name

    def __repr__(self):
        return self._name


BehindCamera = _Sentinel("BehindCamera")
OutsideROI = _Sentinel("OutsideROI")


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
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image extents must be >= 1, got {self.width}x{self.height}")


@dataclass
class CameraPose:
    """World-to-camera transform: q_cam = R @ p_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ConfigError(f"rotation is not orthonormal (max |R^T R - I| = {err:g})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ConfigError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def looking(cls, rotation: np.ndarray, center: np.ndarray) -> "CameraPose":
        """Pose from a rotation and a camera center in world coordinates."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation, -rotation @ np.asarray(center, dtype=np.float64))


@dataclass(frozen=True)
class VoxelGridSpec:
    """Region of interest: min corner, voxel counts, and meters per voxel."""

    origin: tuple[float, float, float]
    dims: tuple[int, int, int]
    resolution: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"grid dims must each be >= 1, got {self.dims}")

    @classmethod
    def paper_default(cls) -> "VoxelGridSpec":
        return cls(origin=(0.0, 0.0, 0.0), dims=(256, 256, 32), resolution=0.2)

    @classmethod
    def desk_default(cls) -> "VoxelGridSpec":
        return cls(origin=(0.0, 0.0, 0.0), dims=(64, 64, 8), resolution=0.2)

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.resolution


@dataclass
class SemanticVolume:
    """Per-voxel class labels; label 0 is empty, UNKNOWN voxels are excluded.

    Occupancy is derived as label != 0, which keeps occupancy and
    semantics consistent by construction for synthetic data.
    """

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        known = self.labels[self.labels != UNKNOWN]
        if known.size and (known.min() < 0 or known.max() >= self.num_classes):
            raise ConfigError("labels outside 0..C-1 / UNKNOWN")

    @property
    def occupancy(self) -> np.ndarray:
        return self.labels > 0

    @property
    def valid(self) -> np.ndarray:
        return self.labels != UNKNOWN


def voxel_center(spec: VoxelGridSpec, idx) -> np.ndarray:
    """World coordinates of the center of voxel `idx`."""
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(spec.dims)):
        raise IndexError(f"voxel index {tuple(idx)} outside dims {spec.dims}")
    return np.asarray(spec.origin) + (idx + 0.5) * spec.resolution


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """(N, 3) centers for all voxels in row-major (x, y, z) order."""
    x, y, z = spec.dims
    gx, gy, gz = np.meshgrid(np.arange(x), np.arange(y), np.arange(z), indexing="ij")
    idx = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return np.asarray(spec.origin) + (idx + 0.5) * spec.resolution


def voxel_indices(spec: VoxelGridSpec) -> np.ndarray:
    x, y, z = spec.dims
    gx, gy, gz = np.meshgrid(np.arange(x), np.arange(y), np.arange(z), indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def project(p, intr: CameraIntrinsics, pose: CameraPose):
    """Pinhole projection of a world point; BehindCamera when q_z <= eps."""
    q = pose.rotation @ np.asarray(p, dtype=np.float64) + pose.translation
    if q[2] <= EPS_DEPTH:
        return BehindCamera
    u = intr.fx * q[0] / q[2] + intr.cx
    v = intr.fy * q[1] / q[2] + intr.cy
    return (u, v, q[2])


def project_points(points: np.ndarray, intr: CameraIntrinsics, pose: CameraPose):
    """Vectorized projection: returns (uv (N,2), depth (N,), in_front (N,)).

    Points behind the camera get uv at the principal point and depth 0;
    callers must mask them with `in_front`.
    """
    q = points @ pose.rotation.T + pose.translation
    depth = q[:, 2]
    in_front = depth > EPS_DEPTH
    safe = np.where(in_front, depth, 1.0)
    uv = np.empty((points.shape[0], 2))
    uv[:, 0] = intr.fx * q[:, 0] / safe + intr.cx
    uv[:, 1] = intr.fy * q[:, 1] / safe + intr.cy
    uv[~in_front] = (intr.cx, intr.cy)
    return uv, np.where(in_front, depth, 0.0), in_front


def in_image(uv, intr: CameraIntrinsics) -> bool:
    u, v = uv[0], uv[1]
    return bool(0 <= u < intr.width and 0 <= v < intr.height)


def in_image_mask(uv: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return ((uv[:, 0] >= 0) & (uv[:, 0] < intr.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height))


def voxelize(spec: VoxelGridSpec, p):
    """Voxel index containing world point p; cells are half-open [min, max)."""
    rel = (np.asarray(p, dtype=np.float64) - np.asarray(spec.origin)) / spec.resolution
    idx = np.floor(rel).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(spec.dims)):
        return OutsideROI
    return (int(idx[0]), int(idx[1]), int(idx[2]))
