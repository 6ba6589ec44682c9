"""Finite-difference verification of every differentiable op and of the
two full pipelines on a miniature grid."""

from __future__ import annotations

import numpy as np

from . import refinement as rf
from . import tensor as T
from . import triplane as tp
from .anchoring import (AnchorBatch, SampleContext, Stage1Params, anchor_aggregate,
                        anchor_weights, fuse_levels, gated_fuse, stage1_forward)
from .geometry import VoxelGridSpec
from .synth import default_camera, make_sample, random_scene
from .tensor import Tensor, grad_check

OP_TOL = 1e-5
PIPELINE_TOL = 1e-4


def _rng(seed=0):
    return np.random.default_rng(seed)


def op_checks() -> list[dict]:
    """One finite-difference check per differentiable op."""
    r = _rng(7)
    a34 = r.standard_normal((3, 4))
    b34 = r.standard_normal((3, 4)) + 3.0       # positive-ish, away from 0
    m45 = r.standard_normal((4, 5))
    plane = r.standard_normal((5, 6, 3))
    field = r.standard_normal((4, 4, 3, 2))
    dw = r.standard_normal((27, 2)) * 0.3
    rows = r.integers(0, 5, (4, 2))
    cols = r.integers(0, 6, (4, 2))
    uv = r.uniform(0.3, 4.2, (7,))
    vv = r.uniform(0.3, 3.2, (7,))
    checks = [
        ("add", lambda x, y: x + y, [a34, b34]),
        ("sub", lambda x, y: x - y, [a34, b34]),
        ("mul", lambda x, y: x * y, [a34, b34]),
        ("div", lambda x, y: x / y, [a34, b34]),
        ("exp", T.exp, [a34 * 0.5]),
        ("log", T.log, [b34]),
        ("tanh", T.tanh, [a34]),
        ("sigmoid", T.sigmoid, [a34]),
        ("abs", T.absval, [a34 + 0.4]),
        ("clip", lambda x: T.clip(x, -0.5, 0.5), [a34 * 0.31 + 0.013]),
        ("softplus_clamped",
         lambda x: T.softplus_clamped(x, 0.3, 4.0), [a34 + 0.9]),
        ("sum", lambda x: T.tsum(x, axis=1), [a34]),
        ("mean", lambda x: T.mean(x, axis=0), [a34]),
        ("reshape", lambda x: T.reshape(x, (2, 6)), [a34]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [a34, b34]),
        ("matmul", T.matmul, [a34, m45]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [a34]),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), [a34]),
        ("gather_rows", lambda x: T.gather_rows(x, np.array([2, 0, 2, 1])), [a34]),
        ("take2d", lambda x: T.take2d(x, rows, cols), [plane]),
        ("scatter_add",
         lambda t, v: T.scatter_add(t, np.array([0, 2, 2, 4]),
                                    np.array([1, 3, 3, 0]), v),
         [plane, r.standard_normal((4, 3))]),
        ("bilinear_sample",
         lambda p, u, v: T.bilinear_sample(p, u, v), [plane, uv, vv]),
        ("shift2d", lambda x: T.shift2d(x, 1, -2), [plane]),
        ("shift3d_edge", lambda x: T.shift3d_edge(x, -1, 1, 1), [field]),
        ("depthwise_conv3d",
         lambda x, w: T.depthwise_conv3d(x, w, dilation=2), [field, dw]),
        ("local_gather",
         lambda p, th: rf.local_gather(p, th),
         [plane, r.uniform(0.4, 1.4, (5, 6, 2))]),
        ("global_aggregate",
         lambda p, th, al: rf.global_aggregate(p, th, al),
         [plane, r.uniform(0.4, 1.4, (5, 6, 2)), r.uniform(0.2, 0.9, (5, 6))]),
    ]
    # composite kernels exercised as single ops
    attn = tp.DeformAttnParams.create(3, 3, 2, r, "gc")
    refs = r.uniform(0.5, 4.0, (4, 2))
    checks.append((
        "deform_sample_attend",
        lambda q, t: tp.deform_sample_attend(q, refs, t, attn),
        [r.standard_normal((4, 3)), plane],
    ))
    out = []
    for name, fn, inputs in checks:
        err = grad_check(fn, [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs])
        out.append({"name": name, "max_err": err, "tol": OP_TOL,
                    "pass": bool(err <= OP_TOL)})
    return out


def _mini_setup(seed: int = 0):
    grid = VoxelGridSpec(origin=np.zeros(3), dims=(6, 6, 4), resolution=0.2)
    intr, pose = default_camera(grid, width=32, height=24, focal=22.0)
    scene = random_scene(grid, num_classes=4, seed=seed, n_boxes=1, n_pillars=1)
    sample = make_sample(scene, intr, pose, noise_sigma=0.01, dropout=0.0,
                         jitter=0.0, channels=6, seed=seed)
    ctx = SampleContext.build(grid, intr, pose, stride=4)
    return grid, sample, ctx


def pipeline_checks(max_coords: int = 2) -> list[dict]:
    """End-to-end gradients of both stages on a 6x6x4 grid."""
    grid, sample, ctx = _mini_setup()
    results = []

    p1 = Stage1Params.create(grid, q_dim=6, d=8, d_embed=4, d_code=8,
                             c_f=6, n_levels=3, seed=3)
    p1_tensors = list(p1.params().values())

    def run1(*_):
        out = stage1_forward(p1, ctx, sample.feature_levels, sample.query_idx,
                             sample.query_feats, stride=sample.strides[0])
        return out["logits"]

    err = grad_check(run1, p1_tensors, max_coords_per_input=max_coords, seed=11)
    results.append({"name": "stage1_pipeline", "max_err": err,
                    "tol": PIPELINE_TOL, "pass": bool(err <= PIPELINE_TOL)})

    p2 = rf.Stage2Params.create(grid, d=8, d_tok=8, d_embed=4, d_code=8,
                                c_f=6, num_classes=4, k_points=2, seed=5)
    p2_tensors = list(p2.params().values())
    occ = sample.volume.occupancy

    def run2(*_):
        out = rf.stage2_forward(p2, ctx, sample.feature_levels, occ,
                                stride=sample.strides[0], beta=0.5)
        return out["logits"]

    err = grad_check(run2, p2_tensors, max_coords_per_input=max_coords, seed=13)
    results.append({"name": "stage2_pipeline", "max_err": err,
                    "tol": PIPELINE_TOL, "pass": bool(err <= PIPELINE_TOL)})
    return results


def full_report(max_coords: int = 2) -> list[dict]:
    return op_checks() + pipeline_checks(max_coords=max_coords)
