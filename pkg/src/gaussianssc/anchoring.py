"""Stage 1: Gaussian anchoring on a fused feature map, gated fusion, and
the occupancy head.

Each voxel descriptor decodes a sub-pixel image-plane Gaussian (offset,
diagonal scales, opacity).  The anchor feature is a normalized Gaussian-
weighted combination of a fixed 5x5 texel window around the projected
voxel, fused back into the descriptor through a learned gate, and a
light 3D head turns the fused field into two-class occupancy logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import triplane as tp
from .tensor import Tensor, ConfigError
from .geometry import (VoxelGridSpec, CameraIntrinsics, CameraPose,
                       project_points, in_image_mask, voxel_centers, voxel_indices)


@dataclass
class FusedFeatureMap:
    features: Tensor          # (H_f, W_f, C_f)
    stride: int
    level_weights: Tensor


def resample_bilinear(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize (a, b, C) -> (h, w, C) with bilinear interpolation."""
    a, b = arr.shape[:2]
    fv = (np.arange(h) + 0.5) * a / h - 0.5
    fu = (np.arange(w) + 0.5) * b / w - 0.5
    fv = np.clip(fv, 0, a - 1)
    fu = np.clip(fu, 0, b - 1)
    v0 = np.minimum(np.floor(fv), max(a - 2, 0)).astype(np.int64)
    u0 = np.minimum(np.floor(fu), max(b - 2, 0)).astype(np.int64)
    v1 = np.minimum(v0 + 1, a - 1)
    u1 = np.minimum(u0 + 1, b - 1)
    av = (fv - v0)[:, None, None]
    au = (fu - u0)[None, :, None]
    return (arr[np.ix_(v0, u0)] * (1 - av) * (1 - au)
            + arr[np.ix_(v0, u1)] * (1 - av) * au
            + arr[np.ix_(v1, u0)] * av * (1 - au)
            + arr[np.ix_(v1, u1)] * av * au)


def fuse_levels(levels: list[np.ndarray], level_weights: Tensor,
                stride: int) -> FusedFeatureMap:
    """Combine multi-scale levels at the finest resolution with
    softmax(level_weights)."""
    if not levels:
        raise ConfigError("fuse_levels: need at least one feature level")
    h, w = levels[0].shape[:2]
    resampled = [lvl if lvl.shape[:2] == (h, w) else resample_bilinear(lvl, h, w)
                 for lvl in levels]
    wts = T.softmax(level_weights, axis=0)
    fused = None
    for r, lvl in enumerate(resampled):
        term = T.gather_rows(wts, np.asarray(r)) * Tensor(lvl)
        fused = term if fused is None else fused + term
    return FusedFeatureMap(features=fused, stride=stride, level_weights=level_weights)


@dataclass
class AnchorBatch:
    """Decoded per-voxel image-plane Gaussians for a batch of voxels."""

    delta: Tensor   # (N, 2) texel offsets
    sigma: Tensor   # (N, 2), clamped positive
    alpha: Tensor   # (N, 1) in (0, 1]


@dataclass
class AnchorDecoderParams:
    w_delta: Tensor
    b_delta: Tensor
    w_sigma: Tensor
    b_sigma: Tensor
    w_alpha: Tensor
    b_alpha: Tensor

    @classmethod
    def create(cls, d: int, rng) -> "AnchorDecoderParams":
        obj = cls(
            w_delta=Tensor(rng.normal(0, 0.01, (d, 2)), requires_grad=True),
            b_delta=Tensor(np.zeros(2), requires_grad=True),
            w_sigma=Tensor(rng.normal(0, 0.01, (d, 2)), requires_grad=True),
            b_sigma=Tensor(np.zeros(2), requires_grad=True),
            w_alpha=Tensor(rng.normal(0, 0.01, (d, 1)), requires_grad=True),
            b_alpha=Tensor(np.zeros(1), requires_grad=True),
        )
        return obj

    def params(self, prefix: str = "anchor") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("w_delta", "b_delta", "w_sigma", "b_sigma", "w_alpha", "b_alpha")}


def decode_anchor(f: Tensor, dec: AnchorDecoderParams,
                  sigma_lo: float = 0.3, sigma_hi: float = 4.0) -> AnchorBatch:
    delta = T.matmul(f, dec.w_delta) + dec.b_delta
    sigma = T.softplus_clamped(T.matmul(f, dec.w_sigma) + dec.b_sigma, sigma_lo, sigma_hi)
    alpha = T.sigmoid(T.matmul(f, dec.w_alpha) + dec.b_alpha)
    return AnchorBatch(delta=delta, sigma=sigma, alpha=alpha)


def anchor_weights(anchors: AnchorBatch, u_prime: np.ndarray,
                   window_radius: int = 2):
    """Normalized Gaussian window weights on the fixed texel grid.

    Returns (weights (N, K), rows (N, K), cols (N, K)) where K =
    (2r+1)^2; rows/cols are unclipped window texel indices around
    round(mu) and mu = u_prime + delta.
    """
    r = window_radius
    n = anchors.delta.shape[0]
    u_prime = np.asarray(u_prime, dtype=np.float64).reshape(n, 2)
    mu = anchors.delta + Tensor(u_prime)
    center = np.round(mu.data)  # window anchored at the nearest texel
    dv, du = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    offs = np.stack([du.ravel(), dv.ravel()], axis=-1)       # (K, 2) as (u, v)
    tex = center[:, None, :] + offs[None, :, :]              # (N, K, 2)
    dx = Tensor(tex[:, :, 0]) - tp._slice_last(mu, 0)        # (N, K)
    dy = Tensor(tex[:, :, 1]) - tp._slice_last(mu, 1)
    sx = tp._slice_last(anchors.sigma, 0)
    sy = tp._slice_last(anchors.sigma, 1)
    quad = T.div(dx * dx, sx * sx) + T.div(dy * dy, sy * sy)
    unnorm = anchors.alpha * T.exp(quad * -0.5)
    weights = T.div(unnorm, T.tsum(unnorm, axis=1, keepdims=True))
    cols = tex[:, :, 0].astype(np.int64)
    rows = tex[:, :, 1].astype(np.int64)
    return weights, rows, cols


def anchor_aggregate(fmap: FusedFeatureMap, weights: Tensor,
                     rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Convex combination of window texels; off-map texels edge-clamp."""
    h, w = fmap.features.shape[:2]
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    tex = T.take2d(fmap.features, rows, cols)            # (N, K, C)
    wk = T.reshape(weights, weights.shape + (1,))
    return T.tsum(tex * wk, axis=1)


def point_sample(fmap: FusedFeatureMap, u_prime: np.ndarray) -> Tensor:
    """Single-pixel baseline: bilinear read at the projected coordinate."""
    u_prime = np.asarray(u_prime, dtype=np.float64)
    return T.bilinear_sample(fmap.features, Tensor(u_prime[:, 0]), Tensor(u_prime[:, 1]))


@dataclass
class GateParams:
    w_proj: Tensor   # C_f x d
    b_proj: Tensor
    w_gate: Tensor   # 2d x d
    b_gate: Tensor

    @classmethod
    def create(cls, c_f: int, d: int, rng) -> "GateParams":
        return cls(
            w_proj=Tensor(rng.normal(0, 1.0 / np.sqrt(c_f), (c_f, d)), requires_grad=True),
            b_proj=Tensor(np.zeros(d), requires_grad=True),
            w_gate=Tensor(rng.normal(0, 1.0 / np.sqrt(2 * d), (2 * d, d)), requires_grad=True),
            b_gate=Tensor(np.zeros(d), requires_grad=True),
        )

    def params(self, prefix: str = "gate") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("w_proj", "b_proj", "w_gate", "b_gate")}


def gated_fuse(f: Tensor, g: Tensor, gp: GateParams,
               visible: np.ndarray | None = None) -> Tensor:
    """h = f + gate * proj(g); out-of-view voxels force the gate closed."""
    pg = T.matmul(g, gp.w_proj) + gp.b_proj
    gate = T.sigmoid(T.matmul(T.concat([f, pg], axis=-1), gp.w_gate) + gp.b_gate)
    if visible is not None:
        gate = gate * Tensor(visible.astype(np.float64)[:, None])
    return f + gate * pg


@dataclass
class OccHeadParams:
    """Two dilated 3x3x3 residual blocks (depthwise taps + pointwise mix)
    and a final 2-logit projection."""

    dw1: Tensor
    pw1: Tensor
    pb1: Tensor
    dw2: Tensor
    pw2: Tensor
    pb2: Tensor
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def create(cls, d: int, rng) -> "OccHeadParams":
        return cls(
            dw1=Tensor(rng.normal(0, 0.1, (27, d)), requires_grad=True),
            pw1=Tensor(rng.normal(0, 0.5 / np.sqrt(d), (d, d)), requires_grad=True),
            pb1=Tensor(np.zeros(d), requires_grad=True),
            dw2=Tensor(rng.normal(0, 0.1, (27, d)), requires_grad=True),
            pw2=Tensor(rng.normal(0, 0.5 / np.sqrt(d), (d, d)), requires_grad=True),
            pb2=Tensor(np.zeros(d), requires_grad=True),
            w_out=Tensor(rng.normal(0, 0.1 / np.sqrt(d), (d, 2)), requires_grad=True),
            b_out=Tensor(np.zeros(2), requires_grad=True),
        )

    def params(self, prefix: str = "occ") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("dw1", "pw1", "pb1", "dw2", "pw2", "pb2", "w_out", "b_out")}


def occupancy_head(field: Tensor, hp: OccHeadParams) -> Tensor:
    """(X, Y, Z, d) -> (X, Y, Z, 2) logits; dilation-1 then dilation-2 blocks."""
    h = field
    for dw, pw, pb, dil in ((hp.dw1, hp.pw1, hp.pb1, 1), (hp.dw2, hp.pw2, hp.pb2, 2)):
        u = T.tanh(T.depthwise_conv3d(h, dw, dilation=dil))
        h = h + T.matmul(u, pw) + pb
    return T.matmul(h, hp.w_out) + hp.b_out


@dataclass
class Stage1Params:
    tri: tp.TriplaneParams
    level_weights: Tensor
    anchor: AnchorDecoderParams
    gate: GateParams
    occ: OccHeadParams

    @classmethod
    def create(cls, grid: VoxelGridSpec, q_dim: int, d: int, d_embed: int,
               d_code: int, c_f: int, n_levels: int, seed: int) -> "Stage1Params":
        rng = np.random.default_rng(seed)
        obj = cls(
            tri=tp.TriplaneParams.create(grid, q_dim, d, d_embed, d_code, rng, prefix="s1.tri"),
            level_weights=Tensor(np.zeros(n_levels), requires_grad=True, name="s1.level_weights"),
            anchor=AnchorDecoderParams.create(d, rng),
            gate=GateParams.create(c_f, d, rng),
            occ=OccHeadParams.create(d, rng),
        )
        for k, t in obj.params().items():
            t.name = k
        return obj

    def params(self) -> dict[str, Tensor]:
        out = self.tri.params("s1.tri")
        out["s1.level_weights"] = self.level_weights
        out.update(self.anchor.params("s1.anchor"))
        out.update(self.gate.params("s1.gate"))
        out.update(self.occ.params("s1.occ"))
        return out


@dataclass
class SampleContext:
    """Static per-sample geometry reused across training steps."""

    grid: VoxelGridSpec
    all_idx: np.ndarray       # (N, 3)
    u_prime: np.ndarray       # (N, 2) fused-map coordinates
    visible: np.ndarray       # (N,) projects inside the image, in front
    depth: np.ndarray         # (N,)

    @classmethod
    def build(cls, grid: VoxelGridSpec, intr: CameraIntrinsics, pose: CameraPose,
              stride: int) -> "SampleContext":
        idx = voxel_indices(grid)
        centers = voxel_centers(grid)
        uv, depth, front = project_points(centers, intr, pose)
        vis = front & in_image_mask(uv, intr)
        up = uv / stride - 0.5
        up[~vis] = ((intr.cx / stride) - 0.5, (intr.cy / stride) - 0.5)
        return cls(grid=grid, all_idx=idx, u_prime=up, visible=vis, depth=depth)


def stage1_forward(params: Stage1Params, ctx: SampleContext,
                   feature_levels: list[np.ndarray], query_idx: np.ndarray,
                   query_feats: np.ndarray, stride: int,
                   sigma_lo: float = 0.3, sigma_hi: float = 4.0,
                   window_radius: int = 2, anchor_mode: str = "gaussian"):
    """Full Stage-1 pipeline; returns occupancy probabilities and
    intermediates needed by the losses."""
    grid = ctx.grid
    X, Y, Z = grid.dims
    fmap = fuse_levels(feature_levels, params.level_weights, stride)
    tri = tp.scatter_queries(params.tri, grid, query_idx, Tensor(np.asarray(query_feats)))
    tri = count_norm_refine(tri, params.tri)
    f = tp.gather_merge(tri.planes, params.tri, grid, ctx.all_idx)     # (N, d)
    anchors = decode_anchor(f, params.anchor, sigma_lo, sigma_hi)
    if anchor_mode == "gaussian":
        wts, rows, cols = anchor_weights(anchors, ctx.u_prime, window_radius)
        g = anchor_aggregate(fmap, wts, rows, cols)
    elif anchor_mode == "point":
        g = point_sample(fmap, ctx.u_prime)
    else:
        raise ConfigError(f"unknown anchor_mode {anchor_mode!r}")
    g = g * Tensor(ctx.visible.astype(np.float64)[:, None])
    h = gated_fuse(f, g, params.gate, visible=ctx.visible)
    field = T.reshape(h, (X, Y, Z, h.shape[-1]))
    logits = occupancy_head(field, params.occ)
    probs = T.softmax(logits, axis=-1)
    return {"logits": logits, "probs": probs, "anchors": anchors,
            "fused": fmap, "descriptor": f}


def count_norm_refine(tri: tp.TriplaneSet, params: tp.TriplaneParams) -> tp.TriplaneSet:
    return tp.refine_all(tp.count_normalize(tri), params)
