"""Stage 2: occupancy-gated Gaussian tokens, image conditioning, and
Gaussian-triplane refinement (local gathering + global aggregation).

The two refinement branches are fused kernels with hand-written VJPs:
local gathering smooths each plane cell with a Gaussian window anchored
at the cell's own extents, global aggregation scatters opacity-weighted
Gaussian mass from each source cell and renormalizes per target, and the
two are blended with a fixed convex coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import triplane as tp
from .tensor import Tensor, ConfigError, ShapeError
from .geometry import VoxelGridSpec, CameraIntrinsics, CameraPose, project_points
from .anchoring import SampleContext, FusedFeatureMap, fuse_levels

R_MAX = 6  # neighborhood cap, in plane cells

_EPS_DEN = 1e-12


def radius_for(theta: np.ndarray) -> np.ndarray:
    """Per-cell window radius: min(ceil(3 * max extent), R_MAX)."""
    return np.minimum(np.ceil(3.0 * theta.max(axis=-1)), R_MAX).astype(np.int64)


def occupancy_gate(tokens: Tensor, mask: np.ndarray) -> Tensor:
    """Zero inactive voxel embeddings; gradients are blocked there too."""
    mask = np.asarray(mask)
    if mask.shape != tokens.shape[:mask.ndim]:
        raise ShapeError(f"occupancy_gate: mask {mask.shape} vs tokens {tokens.shape}")
    m = mask.astype(np.float64).reshape(mask.shape + (1,) * (tokens.ndim - mask.ndim))
    return tokens * Tensor(m)


def condition_tokens(tokens: Tensor, refs: np.ndarray, visible: np.ndarray,
                     fmap: FusedFeatureMap, attn: tp.DeformAttnParams) -> Tensor:
    """Residual deformable read of the fused map at each token's
    projected reference point; out-of-view tokens keep the identity."""
    att = tp.deform_sample_attend(tokens, refs, fmap.features, attn)
    att = att * Tensor(visible.astype(np.float64)[:, None])
    return tokens + att


@dataclass
class PlaneGaussianBatch:
    """Per-voxel 2D Gaussian extents for each triplane + shared opacity."""

    thetas: dict[str, Tensor]   # plane -> (N, 2)
    alpha: Tensor               # (N, 1)


@dataclass
class GaussianDecoderParams:
    w_theta: dict[str, Tensor]
    b_theta: dict[str, Tensor]
    w_alpha: Tensor
    b_alpha: Tensor

    @classmethod
    def create(cls, d: int, rng) -> "GaussianDecoderParams":
        return cls(
            w_theta={p: Tensor(rng.normal(0, 0.01, (d, 2)), requires_grad=True)
                     for p in tp.PLANES},
            b_theta={p: Tensor(np.zeros(2), requires_grad=True) for p in tp.PLANES},
            w_alpha=Tensor(rng.normal(0, 0.01, (d, 1)), requires_grad=True),
            b_alpha=Tensor(np.zeros(1), requires_grad=True),
        )

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for p in tp.PLANES:
            out[f"{prefix}.w_theta.{p}"] = self.w_theta[p]
            out[f"{prefix}.b_theta.{p}"] = self.b_theta[p]
        out[f"{prefix}.w_alpha"] = self.w_alpha
        out[f"{prefix}.b_alpha"] = self.b_alpha
        return out


def decode_plane_gaussians(g: Tensor, dec: GaussianDecoderParams,
                           sigma_lo: float = 0.3, sigma_hi: float = 4.0) -> PlaneGaussianBatch:
    thetas = {p: T.softplus_clamped(T.matmul(g, dec.w_theta[p]) + dec.b_theta[p],
                                    sigma_lo, sigma_hi)
              for p in tp.PLANES}
    alpha = T.sigmoid(T.matmul(g, dec.w_alpha) + dec.b_alpha)
    return PlaneGaussianBatch(thetas=thetas, alpha=alpha)


def _window(thetas: np.ndarray):
    """Shared set-up: per-cell radius, max radius, offset grids, weights, mask."""
    rad = radius_for(thetas)
    rw = int(rad.max()) if rad.size else 1
    k = 2 * rw + 1
    di, dj = np.meshgrid(np.arange(-rw, rw + 1), np.arange(-rw, rw + 1), indexing="ij")
    tx = thetas[..., 0][..., None, None]
    ty = thetas[..., 1][..., None, None]
    w = np.exp(-0.5 * (di ** 2 / (tx * tx) + dj ** 2 / (ty * ty)))
    within = (np.abs(di)[None, None] <= rad[..., None, None]) \
        & (np.abs(dj)[None, None] <= rad[..., None, None])
    return rad, rw, k, di, dj, w * within


def local_gather(plane: Tensor, thetas: Tensor) -> Tensor:
    """Target-centric normalized Gaussian smoothing of a (A, B, d) plane.

    Weights are anchored at each target's own extents, so the output is a
    convex combination of the cells inside its window.
    """
    plane, thetas = T._t(plane), T._t(thetas)
    A, B, d = plane.shape
    P = plane.data
    th = thetas.data
    rad, rw, k, di, dj, w = _window(th)
    pad = np.zeros((A + 2 * rw, B + 2 * rw, d))
    pad[rw:rw + A, rw:rw + B] = P
    valid = np.zeros((A + 2 * rw, B + 2 * rw))
    valid[rw:rw + A, rw:rw + B] = 1.0
    win = np.lib.stride_tricks.sliding_window_view(pad, (k, k), axis=(0, 1))      # (A,B,d,k,k)
    vwin = np.lib.stride_tricks.sliding_window_view(valid, (k, k), axis=(0, 1))   # (A,B,k,k)
    wm = w * vwin
    den = wm.sum(axis=(-2, -1))                                   # (A, B)
    num = np.einsum("abdkl,abkl->abd", win, wm)
    out_data = num / den[..., None]

    def vjp(g, need):
        gn = g / den[..., None]                                   # (A, B, d)
        gp = None
        gtheta = None
        if need[0]:
            gp_pad = np.zeros((A + 2 * rw, B + 2 * rw, d))
            for oi in range(k):
                for oj in range(k):
                    gp_pad[oi:oi + A, oj:oj + B] += wm[:, :, oi, oj, None] * gn
            gp = gp_pad[rw:rw + A, rw:rw + B]
        if need[1]:
            # dS/dtheta via d w_ij: inner product of g with (P_j - out_i)/den_i
            inner = np.einsum("abdkl,abd->abkl", win, g)          # <g, P_j>
            inner -= np.sum(g * out_data, axis=-1)[..., None, None]
            inner *= wm / den[..., None, None]
            gtx = (inner * (di ** 2)).sum(axis=(-2, -1)) / th[..., 0] ** 3
            gty = (inner * (dj ** 2)).sum(axis=(-2, -1)) / th[..., 1] ** 3
            gtheta = np.stack([gtx, gty], axis=-1)
        return gp, gtheta

    return T.custom_op("local_gather", (plane, thetas), out_data, vjp)


def global_aggregate(plane: Tensor, thetas: Tensor, alphas: Tensor) -> Tensor:
    """Source-centric refinement: each cell scatters opacity-weighted
    Gaussian mass within its own radius; targets renormalize.  Targets
    covered by no source fall back to their unrefined value."""
    plane, thetas, alphas = T._t(plane), T._t(thetas), T._t(alphas)
    A, B, d = plane.shape
    P = plane.data
    th = thetas.data
    al = alphas.data.reshape(A, B)
    rad, rw, k, di, dj, w = _window(th)
    aw = al[..., None, None] * w                                  # (A, B, k, k)
    num = np.zeros((A + 2 * rw, B + 2 * rw, d))
    den = np.zeros((A + 2 * rw, B + 2 * rw))
    for oi in range(k):
        for oj in range(k):
            c = aw[:, :, oi, oj]
            num[oi:oi + A, oj:oj + B] += c[..., None] * P
            den[oi:oi + A, oj:oj + B] += c
    num = num[rw:rw + A, rw:rw + B]
    den = den[rw:rw + A, rw:rw + B]
    covered = den > _EPS_DEN
    safe_den = np.where(covered, den, 1.0)
    out_data = np.where(covered[..., None], num / safe_den[..., None], P)

    def vjp(g, need):
        gn = np.where(covered[..., None], g / safe_den[..., None], 0.0)
        go = np.sum(g * out_data, axis=-1) / safe_den * covered   # <g,out>/den
        # pad the target-side fields so source-aligned reads are shifts
        gn_pad = np.zeros((A + 2 * rw, B + 2 * rw, d))
        gn_pad[rw:rw + A, rw:rw + B] = gn
        go_pad = np.zeros((A + 2 * rw, B + 2 * rw))
        go_pad[rw:rw + A, rw:rw + B] = go
        gp = np.zeros((A, B, d)) if need[0] else None
        gth = np.zeros((A, B, 2)) if need[1] else None
        gal = np.zeros((A, B)) if need[2] else None
        for oi in range(k):
            for oj in range(k):
                gns = gn_pad[oi:oi + A, oj:oj + B]                # target i = j + off
                if need[0]:
                    gp += aw[:, :, oi, oj, None] * gns
                if need[1] or need[2]:
                    dc = np.sum(P * gns, axis=-1) - go_pad[oi:oi + A, oj:oj + B]
                    if need[2]:
                        gal += w[:, :, oi, oj] * dc
                    if need[1]:
                        c = aw[:, :, oi, oj] * dc
                        gth[..., 0] += c * (di[oi, oj] ** 2)
                        gth[..., 1] += c * (dj[oi, oj] ** 2)
        if need[0]:
            gp += np.where(covered[..., None], 0.0, g)            # fallback cells
        if need[1]:
            gth[..., 0] /= th[..., 0] ** 3
            gth[..., 1] /= th[..., 1] ** 3
        if need[2]:
            gal = gal.reshape(alphas.shape)
        return gp, gth, gal

    return T.custom_op("global_aggregate", (plane, thetas, alphas), out_data, vjp)


def blend(gather: Tensor, agg: Tensor, beta: float) -> Tensor:
    """Convex combination of the two refinement branches."""
    if not (0.0 <= beta <= 1.0):
        raise ConfigError(f"blend coefficient must be in [0,1], got {beta}")
    if beta == 1.0:
        return gather
    if beta == 0.0:
        return agg
    return gather * beta + agg * (1.0 - beta)


def lift_merge(planes: dict[str, Tensor], params: tp.TriplaneParams,
               grid: VoxelGridSpec, idx: np.ndarray) -> Tensor:
    """Broadcast the refined planes back to voxels; same mechanics (and
    code path) as triplane.gather_merge."""
    return tp.gather_merge(planes, params, grid, idx)


@dataclass
class SemanticHeadParams:
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def create(cls, d: int, num_classes: int, rng) -> "SemanticHeadParams":
        return cls(
            w_out=Tensor(rng.normal(0, 0.1 / np.sqrt(d), (d, num_classes)), requires_grad=True),
            b_out=Tensor(np.zeros(num_classes), requires_grad=True),
        )

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_out": self.w_out, f"{prefix}.b_out": self.b_out}


def semantic_head(h: Tensor, params: SemanticHeadParams,
                  out_shape: tuple) -> Tensor:
    return T.reshape(T.matmul(h, params.w_out) + params.b_out, out_shape)


@dataclass
class Stage2Params:
    embeddings: Tensor                  # (N_vox, D_tok) learned token field
    cross_attn: tp.DeformAttnParams     # token -> fused image map
    tri: tp.TriplaneParams              # stage-2 scatter/refine/merge (g^G)
    self_attn: dict[str, tp.DeformAttnParams]
    plane_cross: dict[str, tp.DeformAttnParams]
    gauss: GaussianDecoderParams
    merge2_w1: Tensor                   # lift-merge MLP for refined planes
    merge2_b1: Tensor
    merge2_w2: Tensor
    merge2_b2: Tensor
    sem: SemanticHeadParams

    @classmethod
    def create(cls, grid: VoxelGridSpec, d: int, d_tok: int, d_embed: int,
               d_code: int, c_f: int, num_classes: int, k_points: int,
               seed: int) -> "Stage2Params":
        rng = np.random.default_rng(seed)
        n_vox = grid.num_voxels
        tri = tp.TriplaneParams.create(grid, d_tok, d, d_embed, d_code, rng, prefix="s2.tri")
        obj = cls(
            embeddings=Tensor(rng.normal(0, 0.1, (n_vox, d_tok)), requires_grad=True,
                              name="s2.embeddings"),
            cross_attn=tp.DeformAttnParams.create(d_tok, c_f, k_points, rng, "s2.cross"),
            tri=tri,
            self_attn={p: tp.DeformAttnParams.create(d, d, k_points, rng, f"s2.self.{p}")
                       for p in tp.PLANES},
            plane_cross={p: tp.DeformAttnParams.create(d, c_f, k_points, rng, f"s2.pcross.{p}")
                         for p in tp.PLANES},
            gauss=GaussianDecoderParams.create(d, rng),
            merge2_w1=Tensor(rng.normal(0, 1.0 / np.sqrt(3 * d), (3 * d, d)), requires_grad=True),
            merge2_b1=Tensor(np.zeros(d), requires_grad=True),
            merge2_w2=Tensor(rng.normal(0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True),
            merge2_b2=Tensor(np.zeros(d), requires_grad=True),
            sem=SemanticHeadParams.create(d, num_classes, rng),
        )
        for k, t in obj.params().items():
            t.name = k
        return obj

    def params(self) -> dict[str, Tensor]:
        out = {"s2.embeddings": self.embeddings}
        out.update(self.cross_attn.params("s2.cross"))
        out.update(self.tri.params("s2.tri"))
        for p in tp.PLANES:
            out.update(self.self_attn[p].params(f"s2.self.{p}"))
            out.update(self.plane_cross[p].params(f"s2.pcross.{p}"))
        out.update(self.gauss.params("s2.gauss"))
        out["s2.merge2_w1"] = self.merge2_w1
        out["s2.merge2_b1"] = self.merge2_b1
        out["s2.merge2_w2"] = self.merge2_w2
        out["s2.merge2_b2"] = self.merge2_b2
        out.update(self.sem.params("s2.sem"))
        return out

    def merge2(self) -> tp.TriplaneParams:
        """Lift-merge reuses the gather_merge machinery with its own MLP."""
        import copy
        shim = copy.copy(self.tri)
        shim.merge_w1 = self.merge2_w1
        shim.merge_b1 = self.merge2_b1
        shim.merge_w2 = self.merge2_w2
        shim.merge_b2 = self.merge2_b2
        return shim


def plane_cell_refs(grid: VoxelGridSpec, ctx: SampleContext) -> dict[str, np.ndarray]:
    """Fused-map reference point per plane cell: mean projection of the
    in-view voxel centers along the free axis (image center fallback)."""
    refs = {}
    X, Y, Z = grid.dims
    up = ctx.u_prime.reshape(X, Y, Z, 2)
    vis = ctx.visible.reshape(X, Y, Z).astype(np.float64)
    axes = {"hw": 2, "hd": 1, "wd": 0}
    for p, free in axes.items():
        wsum = vis.sum(axis=free)
        num = (up * vis[..., None]).sum(axis=free)
        mean_all = up.mean(axis=free)
        ref = np.where(wsum[..., None] > 0, num / np.maximum(wsum, 1.0)[..., None], mean_all)
        refs[p] = ref.reshape(-1, 2)
    return refs


def stage2_forward(params: Stage2Params, ctx: SampleContext,
                   feature_levels: list[np.ndarray], occupancy_mask: np.ndarray,
                   stride: int, beta: float = 0.5,
                   sigma_lo: float = 0.3, sigma_hi: float = 4.0,
                   plane_refs: dict[str, np.ndarray] | None = None):
    """Full Stage-2 pipeline; returns semantic logits (X, Y, Z, C)."""
    grid = ctx.grid
    X, Y, Z = grid.dims
    mask_flat = np.asarray(occupancy_mask, dtype=bool).reshape(-1)
    fmap = fuse_levels(feature_levels, Tensor(np.zeros(len(feature_levels))), stride)
    gated = occupancy_gate(params.embeddings, mask_flat)

    act = np.flatnonzero(mask_flat)
    if act.size:
        tok = T.gather_rows(gated, act)
        refs = ctx.u_prime[act]
        vis = ctx.visible[act]
        cond = condition_tokens(tok, refs, vis, fmap, params.cross_attn)
        q_idx = ctx.all_idx[act]
    else:
        cond = Tensor(np.zeros((0, params.embeddings.shape[1])))
        q_idx = np.zeros((0, 3), dtype=np.int64)

    tri = tp.scatter_queries(params.tri, grid, q_idx, cond)
    tri = tp.count_normalize(tri)
    if plane_refs is None:
        plane_refs = plane_cell_refs(grid, ctx)
    planes = {}
    for p in tp.PLANES:
        pl = tri.planes[p]
        A, B = pl.shape[0], pl.shape[1]
        cells = np.stack(np.meshgrid(np.arange(A), np.arange(B), indexing="ij"),
                         axis=-1).reshape(-1, 2).astype(np.float64)
        flat = T.reshape(pl, (A * B, pl.shape[2]))
        # self-deformable propagation along the plane (u=col, v=row)
        self_ref = cells[:, ::-1]
        flat = flat + tp.deform_sample_attend(flat, self_ref, pl, params.self_attn[p])
        # cross-deformable appearance injection from the fused map
        flat = flat + tp.deform_sample_attend(flat, plane_refs[p], fmap.features,
                                              params.plane_cross[p])
        planes[p] = T.reshape(flat, pl.shape)
    g = tp.gather_merge(planes, params.tri, grid, ctx.all_idx)         # (N, d)
    gauss = decode_plane_gaussians(g, params.gauss, sigma_lo, sigma_hi)

    refined = {}
    free_axis = {"hw": 2, "hd": 1, "wd": 0}
    for p in tp.PLANES:
        A, B = planes[p].shape[0], planes[p].shape[1]
        th = T.reshape(gauss.thetas[p], (X, Y, Z, 2))
        al = T.reshape(gauss.alpha, (X, Y, Z))
        fa = free_axis[p]
        th_cell = T.mean(th, axis=fa)
        al_cell = T.mean(al, axis=fa)
        gathered = local_gather(planes[p], th_cell)
        agg = global_aggregate(planes[p], th_cell, al_cell)
        refined[p] = blend(gathered, agg, beta)

    h = lift_merge(refined, params.merge2(), grid, ctx.all_idx)
    logits = semantic_head(h, params.sem, (X, Y, Z, params.sem.w_out.shape[1]))
    return {"logits": logits, "gauss": gauss, "planes": refined}
