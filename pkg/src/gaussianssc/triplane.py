"""Query-conditioned triplane construction, refinement, and voxel gather/merge.

The 3D scene is factorized into three orthogonal feature planes indexed by
the axis-pair projections (x,y), (x,z), (y,z).  Queries are rasterized onto
the planes with learned projections and count normalization, planes are
refined with local mixing, and voxels read back a merged descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .geometry import VoxelGridSpec

PLANES = ("hw", "hd", "wd")

# axis pairs per plane: voxel index columns feeding each plane
PLANE_AXES = {"hw": (0, 1), "hd": (0, 2), "wd": (1, 2)}


def _linear_init(rng, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))


@dataclass
class AxisEmbeddings:
    """Per-axis positional tables plus the two-layer fusion MLP."""

    e_x: Tensor
    e_y: Tensor
    e_z: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, grid: VoxelGridSpec, d_embed: int, d_code: int, rng) -> "AxisEmbeddings":
        X, Y, Z = grid.dims
        hidden = 2 * d_embed
        return cls(
            e_x=Tensor(rng.normal(0, 0.5, (X, d_embed)), requires_grad=True, name="emb.e_x"),
            e_y=Tensor(rng.normal(0, 0.5, (Y, d_embed)), requires_grad=True, name="emb.e_y"),
            e_z=Tensor(rng.normal(0, 0.5, (Z, d_embed)), requires_grad=True, name="emb.e_z"),
            w1=Tensor(_linear_init(rng, 2 * d_embed, hidden), requires_grad=True, name="emb.w1"),
            b1=Tensor(np.zeros(hidden), requires_grad=True, name="emb.b1"),
            w2=Tensor(_linear_init(rng, hidden, d_code), requires_grad=True, name="emb.w2"),
            b2=Tensor(np.zeros(d_code), requires_grad=True, name="emb.b2"),
        )

    def tables(self, plane: str) -> tuple[Tensor, Tensor]:
        return {"hw": (self.e_x, self.e_y),
                "hd": (self.e_x, self.e_z),
                "wd": (self.e_y, self.e_z)}[plane]

    def params(self, prefix: str = "emb") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("e_x", "e_y", "e_z", "w1", "b1", "w2", "b2")}


def plane_code(emb: AxisEmbeddings, plane: str, cells: np.ndarray) -> Tensor:
    """Positional code for plane cells: MLP over concatenated axis rows.

    `cells` is (M, 2) integer (i, j); a single (i, j) pair also works.
    """
    cells = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    ta, tb = emb.tables(plane)
    if np.any(cells < 0) or np.any(cells[:, 0] >= ta.shape[0]) or np.any(cells[:, 1] >= tb.shape[0]):
        raise IndexError(f"plane_code: cell outside plane extents "
                         f"({ta.shape[0]}, {tb.shape[0]})")
    ra = T.gather_rows(ta, cells[:, 0])
    rb = T.gather_rows(tb, cells[:, 1])
    h = T.tanh(T.matmul(T.concat([ra, rb], axis=-1), emb.w1) + emb.b1)
    return T.matmul(h, emb.w2) + emb.b2


@dataclass
class TriplaneParams:
    """Learned pieces of the triplane: scatter projections, scales,
    per-plane refinement, and the voxel merge MLP."""

    emb: AxisEmbeddings
    psi_w: dict[str, Tensor]     # (C_q + d_code) x d per plane
    psi_b: dict[str, Tensor]
    scales: dict[str, Tensor]    # learned scatter scale s_P, init 1
    mix_w: dict[str, Tensor]     # (9, d, d) local 3x3 mixing
    mix_b: dict[str, Tensor]
    ffn_w1: dict[str, Tensor]
    ffn_b1: dict[str, Tensor]
    ffn_w2: dict[str, Tensor]
    ffn_b2: dict[str, Tensor]
    merge_w1: Tensor
    merge_b1: Tensor
    merge_w2: Tensor
    merge_b2: Tensor

    @classmethod
    def create(cls, grid: VoxelGridSpec, q_dim: int, d: int, d_embed: int,
               d_code: int, rng, prefix: str = "tri") -> "TriplaneParams":
        emb = AxisEmbeddings.create(grid, d_embed, d_code, rng)
        psi_w, psi_b, scales = {}, {}, {}
        mix_w, mix_b = {}, {}
        f1, g1, f2, g2 = {}, {}, {}, {}
        for p in PLANES:
            psi_w[p] = Tensor(_linear_init(rng, q_dim + d_code, d), requires_grad=True)
            psi_b[p] = Tensor(np.zeros(d), requires_grad=True)
            scales[p] = Tensor(np.ones(()), requires_grad=True)
            mix_w[p] = Tensor(rng.normal(0, 0.3 / np.sqrt(9 * d), (9, d, d)), requires_grad=True)
            mix_b[p] = Tensor(np.zeros(d), requires_grad=True)
            f1[p] = Tensor(_linear_init(rng, d, d, 0.5), requires_grad=True)
            g1[p] = Tensor(np.zeros(d), requires_grad=True)
            f2[p] = Tensor(_linear_init(rng, d, d, 0.5), requires_grad=True)
            g2[p] = Tensor(np.zeros(d), requires_grad=True)
        obj = cls(emb=emb, psi_w=psi_w, psi_b=psi_b, scales=scales,
                  mix_w=mix_w, mix_b=mix_b, ffn_w1=f1, ffn_b1=g1, ffn_w2=f2, ffn_b2=g2,
                  merge_w1=Tensor(_linear_init(rng, 3 * d, d), requires_grad=True),
                  merge_b1=Tensor(np.zeros(d), requires_grad=True),
                  merge_w2=Tensor(_linear_init(rng, d, d), requires_grad=True),
                  merge_b2=Tensor(np.zeros(d), requires_grad=True))
        for k, t in obj.params(prefix).items():
            t.name = k
        return obj

    def params(self, prefix: str = "tri") -> dict[str, Tensor]:
        out = self.emb.params(f"{prefix}.emb")
        for p in PLANES:
            out[f"{prefix}.psi_w.{p}"] = self.psi_w[p]
            out[f"{prefix}.psi_b.{p}"] = self.psi_b[p]
            out[f"{prefix}.scale.{p}"] = self.scales[p]
            out[f"{prefix}.mix_w.{p}"] = self.mix_w[p]
            out[f"{prefix}.mix_b.{p}"] = self.mix_b[p]
            out[f"{prefix}.ffn_w1.{p}"] = self.ffn_w1[p]
            out[f"{prefix}.ffn_b1.{p}"] = self.ffn_b1[p]
            out[f"{prefix}.ffn_w2.{p}"] = self.ffn_w2[p]
            out[f"{prefix}.ffn_b2.{p}"] = self.ffn_b2[p]
        out[f"{prefix}.merge_w1"] = self.merge_w1
        out[f"{prefix}.merge_b1"] = self.merge_b1
        out[f"{prefix}.merge_w2"] = self.merge_w2
        out[f"{prefix}.merge_b2"] = self.merge_b2
        return out


@dataclass
class TriplaneSet:
    """Runtime state: one feature plane and scatter-count field per
    orthogonal projection."""

    planes: dict[str, Tensor]
    counts: dict[str, np.ndarray]
    grid: VoxelGridSpec


def plane_extents(grid: VoxelGridSpec, plane: str) -> tuple[int, int]:
    a, b = PLANE_AXES[plane]
    return grid.dims[a], grid.dims[b]


def scatter_queries(params: TriplaneParams, grid: VoxelGridSpec,
                    query_idx: np.ndarray, query_feats: Tensor) -> TriplaneSet:
    """Rasterize queries onto all three planes via the learned projections."""
    query_idx = np.asarray(query_idx, dtype=np.int64).reshape(-1, 3)
    if np.any(query_idx < 0) or np.any(query_idx >= np.asarray(grid.dims)):
        raise IndexError("scatter_queries: query index outside grid")
    planes, counts = {}, {}
    for p in PLANES:
        a, b = PLANE_AXES[p]
        ea, eb = plane_extents(grid, p)
        d = params.psi_w[p].shape[1]
        zero = Tensor(np.zeros((ea, eb, d)))
        cnt = np.zeros((ea, eb), dtype=np.int64)
        if query_idx.shape[0] == 0:
            planes[p] = zero
            counts[p] = cnt
            continue
        cells = query_idx[:, (a, b)]
        rho = plane_code(params.emb, p, cells)
        contrib = T.matmul(T.concat([query_feats, rho], axis=-1), params.psi_w[p]) + params.psi_b[p]
        contrib = contrib * params.scales[p]
        planes[p] = T.scatter_add(zero, cells[:, 0], cells[:, 1], contrib)
        np.add.at(cnt, (cells[:, 0], cells[:, 1]), 1)
        counts[p] = cnt
    return TriplaneSet(planes=planes, counts=counts, grid=grid)


def count_normalize(tri: TriplaneSet) -> TriplaneSet:
    """Divide each plane cell by max(count, 1); counts are retained."""
    planes = {}
    for p in PLANES:
        inv = 1.0 / np.maximum(tri.counts[p], 1)
        planes[p] = tri.planes[p] * Tensor(inv[:, :, None])
    return TriplaneSet(planes=planes, counts=tri.counts, grid=tri.grid)


_OFFSETS2 = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]


def refine_plane(plane: Tensor, params: TriplaneParams, p: str) -> Tensor:
    """3x3 local linear mixing + residual, then pointwise FFN + residual."""
    mixed = None
    for k, (di, dj) in enumerate(_OFFSETS2):
        src = plane if (di, dj) == (0, 0) else T.shift2d(plane, di, dj)
        term = T.matmul(src, _slice_tap(params.mix_w[p], k))
        mixed = term if mixed is None else mixed + term
    h = plane + mixed + params.mix_b[p]
    ff = T.matmul(T.tanh(T.matmul(h, params.ffn_w1[p]) + params.ffn_b1[p]),
                  params.ffn_w2[p]) + params.ffn_b2[p]
    return h + ff


def _slice_tap(w: Tensor, k: int) -> Tensor:
    return T.reshape(T.gather_rows(w, np.asarray([k])), w.shape[1:])


def refine_all(tri: TriplaneSet, params: TriplaneParams) -> TriplaneSet:
    return TriplaneSet(planes={p: refine_plane(tri.planes[p], params, p) for p in PLANES},
                       counts=tri.counts, grid=tri.grid)


def gather_merge(planes: dict[str, Tensor], params: TriplaneParams,
                 grid: VoxelGridSpec, idx: np.ndarray) -> Tensor:
    """Concatenate the three plane reads at each voxel and merge by MLP."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        raise IndexError("gather_merge: voxel index outside grid")
    reads = []
    for p in PLANES:
        a, b = PLANE_AXES[p]
        reads.append(T.take2d(planes[p], idx[:, a], idx[:, b]))
    cat = T.concat(reads, axis=-1)
    h = T.tanh(T.matmul(cat, params.merge_w1) + params.merge_b1)
    return T.matmul(h, params.merge_w2) + params.merge_b2


@dataclass
class DeformAttnParams:
    """Single-head offset-sampling attention: K content-predicted sample
    points with softmax-mixed, projected bilinear reads."""

    w_off: Tensor   # d x 2K
    b_off: Tensor
    w_wt: Tensor    # d x K
    b_wt: Tensor
    w_proj: Tensor  # C x d
    b_proj: Tensor
    k_points: int

    @classmethod
    def create(cls, d: int, target_channels: int, k_points: int, rng,
               name: str = "attn") -> "DeformAttnParams":
        if k_points < 1:
            raise T.ConfigError(f"deformable attention needs K >= 1, got {k_points}")
        obj = cls(
            w_off=Tensor(rng.normal(0, 0.01, (d, 2 * k_points)), requires_grad=True),
            # small nonzero bias keeps initial sample points off the exact
            # texel lattice, where the bilinear kernel has derivative kinks
            b_off=Tensor(rng.uniform(0.1, 0.4, 2 * k_points), requires_grad=True),
            w_wt=Tensor(rng.normal(0, 0.1, (d, k_points)), requires_grad=True),
            b_wt=Tensor(np.zeros(k_points), requires_grad=True),
            w_proj=Tensor(_linear_init(rng, target_channels, d), requires_grad=True),
            b_proj=Tensor(np.zeros(d), requires_grad=True),
            k_points=k_points,
        )
        for k, t in obj.params(name).items():
            t.name = k
        return obj

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("w_off", "b_off", "w_wt", "b_wt", "w_proj", "b_proj")}


def deform_sample_attend(query_feat: Tensor, ref: np.ndarray, target: Tensor,
                         params: DeformAttnParams) -> Tensor:
    """Content-predicted K-point sampling attention on a 2D feature plane.

    ref is (N, 2) continuous (u, v) on `target`; output is (N, d).
    """
    n = query_feat.shape[0]
    k = params.k_points
    offsets = T.reshape(T.matmul(query_feat, params.w_off) + params.b_off, (n, k, 2))
    weights = T.softmax(T.matmul(query_feat, params.w_wt) + params.b_wt, axis=-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(n, 1, 2)
    pos = offsets + Tensor(np.broadcast_to(ref, (n, 1, 2)).copy())
    pu = T.reshape(_slice_last(pos, 0), (n, k))
    pv = T.reshape(_slice_last(pos, 1), (n, k))
    samples = T.bilinear_sample(target, pu, pv)          # (n, k, C)
    proj = T.matmul(samples, params.w_proj) + params.b_proj  # (n, k, d)
    w3 = T.reshape(weights, (n, k, 1))
    return T.tsum(proj * w3, axis=1)


def _slice_last(t: Tensor, j: int) -> Tensor:
    """t[..., j:j+1] as a differentiable op."""
    idx = np.asarray([j])
    data = t.data[..., idx]

    def vjp(g, need):
        z = np.zeros_like(t.data)
        z[..., idx] = g
        return (z,)

    return T.custom_op("slice_last", (t,), data, vjp)
