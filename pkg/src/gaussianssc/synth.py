"""Deterministic synthetic scenes with consistent multi-scale image features.

Stands in for real data and the CNN backbone: scenes are rasterized
primitives in the voxel grid, image features come from per-texel ray
casting that emits a fixed orthogonal class code plus encoded inverse
depth, and seed queries mimic a noisy visible-surface prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, CameraPose, SemanticVolume, VoxelGridSpec,
                       project_points, in_image_mask, voxel_centers)
from .tensor import ConfigError


@dataclass(frozen=True)
class Primitive:
    kind: str                      # "ground", "box", or "pillar"
    min_idx: tuple[int, int, int]  # voxel-space min corner
    size: tuple[int, int, int]     # voxel extents
    label: int


@dataclass
class SceneSpec:
    seed: int
    grid: VoxelGridSpec
    primitives: list[Primitive]
    num_classes: int


@dataclass
class SyntheticSample:
    volume: SemanticVolume
    intrinsics: CameraIntrinsics
    pose: CameraPose
    feature_levels: list[np.ndarray]   # strides 4, 8, 16
    strides: tuple[int, ...]
    query_idx: np.ndarray              # (M, 3) voxel indices
    query_feats: np.ndarray            # (M, C_f)
    visible_idx: np.ndarray            # (V, 3) first-hit voxels


def generate_scene(spec: SceneSpec) -> SemanticVolume:
    """Rasterize primitives in painter's order (later overwrites earlier)."""
    dims = np.asarray(spec.grid.dims)
    labels = np.zeros(spec.grid.dims, dtype=np.int64)
    for prim in spec.primitives:
        lo = np.asarray(prim.min_idx)
        hi = lo + np.asarray(prim.size)
        if np.any(lo < 0) or np.any(hi > dims):
            raise ConfigError(f"primitive {prim} outside grid dims {spec.grid.dims}")
        if not (0 < prim.label < spec.num_classes):
            raise ConfigError(f"primitive label {prim.label} outside 1..{spec.num_classes - 1}")
        labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = prim.label
    return SemanticVolume(labels, spec.num_classes)


def random_scene(grid: VoxelGridSpec, num_classes: int, seed: int,
                 n_boxes: int = 3, n_pillars: int = 2) -> SceneSpec:
    """Ground layer plus randomly placed boxes (class 2) and pillars (class 3)."""
    rng = np.random.default_rng(seed)
    X, Y, Z = grid.dims
    prims = [Primitive("ground", (0, 0, 0), (X, Y, 1), 1)]
    for _ in range(n_boxes):
        sx = min(int(rng.integers(5, max(6, X // 5))), max(1, X - 3))
        sy = min(int(rng.integers(5, max(6, Y // 5))), max(1, Y - 3))
        # boxes stay below pillar height so the thin pillars keep a
        # visible cross-section from the elevated camera
        sz = int(rng.integers(2, max(3, Z // 2)))
        x0 = int(rng.integers(1, max(2, X - sx - 1)))
        y0 = int(rng.integers(1, max(2, Y - sy - 1)))
        prims.append(Primitive("box", (x0, y0, 0), (sx, sy, sz), 2))
    for _ in range(n_pillars):
        sz = int(rng.integers(Z - 3, Z - 1))
        x0 = int(rng.integers(1, max(2, X - 3)))
        y0 = int(rng.integers(1, max(2, Y - 3)))
        prims.append(Primitive("pillar", (x0, y0, 0), (3, 3, sz), 3))
    return SceneSpec(seed=seed, grid=grid, primitives=prims, num_classes=num_classes)


def default_camera(grid: VoxelGridSpec, width: int = 160, height: int = 120,
                   focal: float = 110.0) -> tuple[CameraIntrinsics, CameraPose]:
    """Camera in front of the ROI looking along +x, image y pointing down."""
    intr = CameraIntrinsics(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)
    ex = np.asarray(grid.extent)
    # high vantage point: a grazing view would hide everything behind the
    # first obstacle, a steep one keeps most of the scene observable
    center = np.asarray(grid.origin) + np.array([-0.85 * ex[0], 0.5 * ex[1], 4.0 * ex[2]])
    # camera axes in world coords: right = -y, down = -z, forward = +x
    rotation = np.array([[0.0, -1.0, 0.0],
                         [0.0, 0.0, -1.0],
                         [1.0, 0.0, 0.0]])
    pose = CameraPose.looking(rotation, center)
    return intr, pose


def class_codes(num_classes: int, channels: int) -> np.ndarray:
    """Fixed orthogonal per-class code vectors; row c is the code of class c."""
    if channels < num_classes + 2:
        raise ConfigError(f"need >= {num_classes + 2} feature channels, got {channels}")
    codes = np.zeros((num_classes, channels))
    codes[:, :num_classes] = np.eye(num_classes)
    return codes


def _ray_grid(intr: CameraIntrinsics, pose: CameraPose, stride: int):
    """World-space origins/directions for texel centers at the given stride."""
    h = intr.height // stride
    w = intr.width // stride
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = (jj + 0.5) * stride
    v = (ii + 0.5) * stride
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                      np.ones_like(u)], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T applied row-wise
    origin = -pose.rotation.T @ pose.translation
    return origin, d_world.reshape(-1, 3), (h, w)


def _raycast(volume: SemanticVolume, grid: VoxelGridSpec,
             intr: CameraIntrinsics, pose: CameraPose, stride: int):
    """First-hit class, camera depth, and hit voxel index per texel."""
    origin, dirs, (h, w) = _ray_grid(intr, pose, stride)
    n = dirs.shape[0]
    step = 0.45 * grid.resolution
    t_max = float(np.linalg.norm(grid.extent) + np.linalg.norm(
        np.asarray(grid.origin) - origin) + 1.0)
    hit_class = np.zeros(n, dtype=np.int64)
    hit_depth = np.zeros(n)
    hit_voxel = np.full((n, 3), -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    gorigin = np.asarray(grid.origin)
    gdims = np.asarray(grid.dims)
    ts = np.arange(step, t_max, step)
    for t in ts:
        if not alive.any():
            break
        pts = origin + dirs[alive] * t
        rel = np.floor((pts - gorigin) / grid.resolution).astype(np.int64)
        inside = np.all((rel >= 0) & (rel < gdims), axis=1)
        lab = np.zeros(inside.shape[0], dtype=np.int64)
        ri = rel[inside]
        lab[inside] = volume.labels[ri[:, 0], ri[:, 1], ri[:, 2]]
        hit = lab > 0
        if hit.any():
            alive_idx = np.flatnonzero(alive)
            idx = alive_idx[hit]
            hit_class[idx] = lab[hit]
            q = (pts[hit] @ pose.rotation.T + pose.translation)
            hit_depth[idx] = q[:, 2]
            hit_voxel[idx] = rel[hit]
            alive[idx] = False
    return hit_class.reshape(h, w), hit_depth.reshape(h, w), hit_voxel.reshape(h, w, 3)


def render_features(volume: SemanticVolume, grid: VoxelGridSpec,
                    intr: CameraIntrinsics, pose: CameraPose,
                    noise_sigma: float, seed: int, channels: int = 8,
                    strides: tuple[int, ...] = (4, 8, 16)):
    """Per-texel class code + inverse depth at the base stride, then
    average-pooled coarser levels; seeded Gaussian noise per level."""
    codes = class_codes(volume.num_classes, channels)
    base_stride = strides[0]
    hit_class, hit_depth, hit_voxel = _raycast(volume, grid, intr, pose, base_stride)
    h, w = hit_class.shape
    base = codes[hit_class].astype(np.float64)
    inv_depth = np.where(hit_depth > 0, 1.0 / np.maximum(hit_depth, 1e-6), 0.0)
    base[:, :, volume.num_classes] = inv_depth
    levels = [base]
    for s in strides[1:]:
        f = s // base_stride
        lvl = levels[0][:h - h % f, :w - w % f]
        lvl = lvl.reshape(h // f, f, w // f, f, channels).mean(axis=(1, 3))
        levels.append(lvl)
    rng = np.random.default_rng(seed)
    if noise_sigma > 0:
        levels = [lvl + rng.normal(0.0, noise_sigma, size=lvl.shape) for lvl in levels]
    return levels, hit_voxel


def seed_queries(volume: SemanticVolume, grid: VoxelGridSpec,
                 intr: CameraIntrinsics, pose: CameraPose,
                 base_level: np.ndarray, base_stride: int,
                 hit_voxel: np.ndarray, dropout: float, jitter: float, seed: int):
    """Visible-surface voxels with dropout and +-1 voxel jitter; features
    are bilinear reads of the base feature level at each projection."""
    if not (0.0 <= dropout < 1.0):
        raise ConfigError(f"dropout must be in [0,1), got {dropout}")
    flat = hit_voxel.reshape(-1, 3)
    flat = flat[flat[:, 0] >= 0]
    if flat.size == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, base_level.shape[-1]))
    vis = np.unique(flat, axis=0)
    rng = np.random.default_rng(seed)
    keep = rng.random(vis.shape[0]) >= dropout
    idx = vis[keep].copy()
    if jitter > 0 and idx.shape[0] > 0:
        jmask = rng.random(idx.shape[0]) < jitter
        shift = rng.integers(-1, 2, size=(idx.shape[0], 3))
        idx[jmask] += shift[jmask]
        idx = np.clip(idx, 0, np.asarray(grid.dims) - 1)
    centers = np.asarray(grid.origin) + (idx + 0.5) * grid.resolution
    uv, _, front = project_points(centers, intr, pose)
    fu = uv[:, 0] / base_stride - 0.5
    fv = uv[:, 1] / base_stride - 0.5
    hh, ww = base_level.shape[:2]
    fu = np.clip(fu, 0, ww - 1)
    fv = np.clip(fv, 0, hh - 1)
    u0 = np.minimum(np.floor(fu), max(ww - 2, 0)).astype(np.int64)
    v0 = np.minimum(np.floor(fv), max(hh - 2, 0)).astype(np.int64)
    au, av = fu - u0, fv - v0
    u1 = np.minimum(u0 + 1, ww - 1)
    v1 = np.minimum(v0 + 1, hh - 1)
    feats = (base_level[v0, u0] * ((1 - au) * (1 - av))[:, None]
             + base_level[v0, u1] * (au * (1 - av))[:, None]
             + base_level[v1, u0] * ((1 - au) * av)[:, None]
             + base_level[v1, u1] * (au * av)[:, None])
    feats[~front] = 0.0
    return idx, feats


def make_sample(scene: SceneSpec, intr: CameraIntrinsics, pose: CameraPose,
                noise_sigma: float, dropout: float, jitter: float,
                channels: int, seed: int) -> SyntheticSample:
    volume = generate_scene(scene)
    levels, hit_voxel = render_features(volume, scene.grid, intr, pose,
                                        noise_sigma, seed, channels=channels)
    strides = (4, 8, 16)
    q_idx, q_feats = seed_queries(volume, scene.grid, intr, pose, levels[0],
                                  strides[0], hit_voxel, dropout, jitter, seed + 1)
    flat = hit_voxel.reshape(-1, 3)
    visible = np.unique(flat[flat[:, 0] >= 0], axis=0)
    return SyntheticSample(volume=volume, intrinsics=intr, pose=pose,
                           feature_levels=levels, strides=strides,
                           query_idx=q_idx, query_feats=q_feats,
                           visible_idx=visible)
