"""Training, evaluation, and ablation loops over the synthetic suite."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import refinement as rf
from . import tensor as T
from .anchoring import SampleContext, Stage1Params, stage1_forward
from .config import RunConfig
from .gssc_io import save_params, load_params, write_gssc
from .synth import SyntheticSample, make_sample, random_scene
from .tensor import Adam, Tape, Tensor


@dataclass
class Suite:
    train: list[SyntheticSample]
    eval: list[SyntheticSample]
    contexts_train: list[SampleContext]
    contexts_eval: list[SampleContext]


def build_suite(cfg: RunConfig, seed_offset: int = 0) -> Suite:
    grid = cfg.grid()
    intr, pose = cfg.camera()
    train, ev = [], []
    for i in range(cfg.num_train_scenes):
        scene = random_scene(grid, cfg.num_classes, cfg.seed + seed_offset + i,
                             cfg.boxes_per_scene, cfg.pillars_per_scene)
        train.append(make_sample(scene, intr, pose, cfg.noise_sigma, cfg.query_dropout,
                                 cfg.query_jitter, cfg.feat_channels,
                                 cfg.seed + seed_offset + 1000 + i))
    for i in range(cfg.num_eval_scenes):
        scene = random_scene(grid, cfg.num_classes,
                             cfg.seed + seed_offset + 5000 + i,
                             cfg.boxes_per_scene, cfg.pillars_per_scene)
        ev.append(make_sample(scene, intr, pose, cfg.noise_sigma, cfg.query_dropout,
                              cfg.query_jitter, cfg.feat_channels,
                              cfg.seed + seed_offset + 6000 + i))
    ctx = SampleContext.build(grid, intr, pose, stride=4)
    # one camera for the whole suite, so the context is shared
    return Suite(train=train, eval=ev,
                 contexts_train=[ctx] * len(train), contexts_eval=[ctx] * len(ev))


def make_stage1(cfg: RunConfig) -> Stage1Params:
    return Stage1Params.create(cfg.grid(), q_dim=cfg.feat_channels, d=cfg.d,
                               d_embed=cfg.d_embed, d_code=cfg.d_code,
                               c_f=cfg.feat_channels, n_levels=3, seed=cfg.seed)


def make_stage2(cfg: RunConfig) -> rf.Stage2Params:
    return rf.Stage2Params.create(cfg.grid(), d=cfg.d, d_tok=cfg.d_token,
                                  d_embed=cfg.d_embed, d_code=cfg.d_code,
                                  c_f=cfg.feat_channels, num_classes=cfg.num_classes,
                                  k_points=cfg.k_points, seed=cfg.seed)


def stage1_loss(cfg: RunConfig, *, out, sample, step: int) -> Tensor:
    occ = sample.volume.occupancy.reshape(-1)
    valid = sample.volume.valid.reshape(-1)
    if cfg.negative_sampling:
        mask = L.negative_sample(occ, valid, cfg.neg_ratio,
                                 seed=cfg.seed * 100003 + step, floor=cfg.neg_floor)
    else:
        mask = valid
    p1 = rf.tp._slice_last(T.reshape(out["probs"], (-1, 2)), 1)
    loss = L.balanced_bce_occupancy(T.reshape(p1, (-1,)), occ, mask,
                                    w0=1.0 - cfg.occ_alpha, w1=cfg.occ_alpha)
    loss = loss * (1.0 / max(mask.sum(), 1))  # sum form, scaled per sampled voxel for stable lr
    loss = loss + cfg.lambda_sigma * L.sigma_reg(out["anchors"].sigma, cfg.sigma0) * (1.0 / occ.size)
    loss = loss + cfg.lambda_delta * L.delta_reg(out["anchors"].delta) * (1.0 / occ.size)
    return loss


def predict_stage1(cfg: RunConfig, params: Stage1Params, ctx: SampleContext,
                   sample: SyntheticSample) -> np.ndarray:
    out = stage1_forward(params, ctx, sample.feature_levels, sample.query_idx,
                         sample.query_feats, stride=sample.strides[0],
                         sigma_lo=cfg.sigma_lo, sigma_hi=cfg.sigma_hi,
                         window_radius=cfg.window_radius, anchor_mode=cfg.anchor_mode)
    return np.argmax(out["probs"].data, axis=-1).astype(bool)


def eval_stage1(cfg: RunConfig, params: Stage1Params, suite: Suite,
                split: str, step: int) -> dict:
    samples = suite.train if split == "train" else suite.eval
    contexts = suite.contexts_train if split == "train" else suite.contexts_eval
    preds, gts, valids = [], [], []
    for ctx, s in zip(contexts, samples):
        preds.append(predict_stage1(cfg, params, ctx, s).reshape(-1))
        gts.append(s.volume.occupancy.reshape(-1))
        valids.append(s.volume.valid.reshape(-1))
    pred = np.concatenate(preds).astype(np.int64)
    gt = np.concatenate(gts).astype(np.int64)
    rec = L.metrics_record(step, split, pred, gt, np.concatenate(valids), 2)
    rec["miou"] = 0.0  # stage 1 is binary; no semantic classes
    return rec


def train_stage1(cfg: RunConfig, suite: Suite | None = None,
                 log_fn=None) -> tuple[Stage1Params, list[dict]]:
    suite = suite or build_suite(cfg)
    params = make_stage1(cfg)
    opt = Adam(params.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)
    records = []
    for step in range(1, cfg.steps + 1):
        i = (step - 1) % len(suite.train)
        sample = suite.train[i]
        ctx = suite.contexts_train[i]
        opt.zero_grad()
        with Tape() as tape:
            out = stage1_forward(params, ctx, sample.feature_levels, sample.query_idx,
                                 sample.query_feats, stride=sample.strides[0],
                                 sigma_lo=cfg.sigma_lo, sigma_hi=cfg.sigma_hi,
                                 window_radius=cfg.window_radius,
                                 anchor_mode=cfg.anchor_mode)
            loss = stage1_loss(cfg, out=out, sample=sample, step=step)
            tape.backward(loss)
        opt.step()
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            rec = eval_stage1(cfg, params, suite, "eval", step)
            rec["loss"] = loss.data.item()
            records.append(rec)
            if log_fn:
                log_fn(rec)
            if cfg.early_stop_metric > 0 and rec["iou"] >= cfg.early_stop_metric:
                break
    return params, records


def stage2_occupancy_mask(cfg: RunConfig, sample: SyntheticSample,
                          ctx: SampleContext,
                          s1_params: Stage1Params | None) -> np.ndarray:
    if cfg.use_gt_occupancy or s1_params is None:
        return sample.volume.occupancy
    return predict_stage1(cfg, s1_params, ctx, sample).reshape(sample.volume.labels.shape)


def class_balance_weights(labels: np.ndarray, valid: np.ndarray,
                          num_classes: int) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1."""
    counts = np.bincount(labels[valid], minlength=num_classes).astype(np.float64)
    w = valid.sum() / (num_classes * np.maximum(counts, 1.0))
    return w / w.mean()


def stage2_loss(cfg: RunConfig, logits: Tensor, sample: SyntheticSample) -> Tensor:
    labels = sample.volume.labels.reshape(-1)
    valid = sample.volume.valid.reshape(-1)
    weights = class_balance_weights(labels, valid, cfg.num_classes)
    loss = cfg.lambda_ce * L.weighted_ce_semantic(logits, labels, valid, weights)
    loss = loss + cfg.lambda_sem * L.sem_scal(logits, labels, valid)
    return loss


def eval_stage2(cfg: RunConfig, params: rf.Stage2Params, suite: Suite,
                split: str, step: int, s1_params: Stage1Params | None) -> dict:
    samples = suite.train if split == "train" else suite.eval
    contexts = suite.contexts_train if split == "train" else suite.contexts_eval
    preds, gts, valids = [], [], []
    for ctx, s in zip(contexts, samples):
        occ = stage2_occupancy_mask(cfg, s, ctx, s1_params)
        out = rf.stage2_forward(params, ctx, s.feature_levels, occ,
                                stride=s.strides[0], beta=cfg.beta,
                                sigma_lo=cfg.sigma_lo, sigma_hi=cfg.sigma_hi)
        preds.append(np.argmax(out["logits"].data, axis=-1).reshape(-1))
        gts.append(s.volume.labels.reshape(-1))
        valids.append(s.volume.valid.reshape(-1))
    return L.metrics_record(step, split, np.concatenate(preds), np.concatenate(gts),
                            np.concatenate(valids), cfg.num_classes)


def train_stage2(cfg: RunConfig, suite: Suite | None = None,
                 s1_params: Stage1Params | None = None,
                 log_fn=None) -> tuple[rf.Stage2Params, list[dict]]:
    suite = suite or build_suite(cfg)
    params = make_stage2(cfg)
    opt = Adam(params.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)
    records = []
    occ_masks = [stage2_occupancy_mask(cfg, s, c, s1_params)
                 for s, c in zip(suite.train, suite.contexts_train)]
    for step in range(1, cfg.steps + 1):
        i = (step - 1) % len(suite.train)
        sample = suite.train[i]
        ctx = suite.contexts_train[i]
        opt.zero_grad()
        with Tape() as tape:
            out = rf.stage2_forward(params, ctx, sample.feature_levels, occ_masks[i],
                                    stride=sample.strides[0], beta=cfg.beta,
                                    sigma_lo=cfg.sigma_lo, sigma_hi=cfg.sigma_hi)
            loss = stage2_loss(cfg, out["logits"], sample)
            tape.backward(loss)
        opt.step()
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            rec = eval_stage2(cfg, params, suite, "eval", step, s1_params)
            rec["loss"] = loss.data.item()
            records.append(rec)
            if log_fn:
                log_fn(rec)
            if cfg.early_stop_metric > 0 and rec["miou"] >= cfg.early_stop_metric:
                break
    return params, records


def export_predictions(cfg: RunConfig, out_dir: str, stage: int,
                       s1_params: Stage1Params | None,
                       s2_params: rf.Stage2Params | None,
                       suite: Suite) -> None:
    os.makedirs(out_dir, exist_ok=True)
    sample = suite.eval[0]
    ctx = suite.contexts_eval[0]
    dims = sample.volume.labels.shape
    if stage == 1:
        pred = predict_stage1(cfg, s1_params, ctx, sample).reshape(dims)
        write_gssc(os.path.join(out_dir, "pred_occupancy.gssc"),
                   pred.astype(np.uint8))
    else:
        occ = stage2_occupancy_mask(cfg, sample, ctx, s1_params)
        out = rf.stage2_forward(s2_params, ctx, sample.feature_levels, occ,
                                stride=sample.strides[0], beta=cfg.beta,
                                sigma_lo=cfg.sigma_lo, sigma_hi=cfg.sigma_hi)
        labels = np.argmax(out["logits"].data, axis=-1)
        write_gssc(os.path.join(out_dir, "pred_labels.gssc"), labels.astype(np.uint8))
        write_gssc(os.path.join(out_dir, "pred_occupancy.gssc"),
                   (labels > 0).astype(np.uint8))
    write_gssc(os.path.join(out_dir, "gt_labels.gssc"),
               sample.volume.labels.astype(np.uint8))


def ablation_stage1_config(cfg: RunConfig, anchor_mode: str,
                           negative_sampling: bool) -> RunConfig:
    """Jittered-seed suite: sparse noisy queries make the image read the
    deciding evidence, so the anchoring strategy actually matters."""
    c = _clone_cfg(cfg)
    c.anchor_mode = anchor_mode
    c.negative_sampling = negative_sampling
    c.query_jitter = max(cfg.query_jitter, 0.5)
    c.query_dropout = 0.95
    c.noise_sigma = 0.2
    c.num_train_scenes = 4
    c.num_eval_scenes = 2
    c.steps = min(cfg.steps, 80)
    c.eval_interval = c.steps
    c.early_stop_metric = 0.0
    return c


def ablation_stage2_config(cfg: RunConfig, beta: float) -> RunConfig:
    c = _clone_cfg(cfg)
    c.stage = 2
    c.beta = beta
    c.steps = min(cfg.steps, 60)
    c.eval_interval = c.steps
    c.early_stop_metric = 0.0
    return c


def ablate(cfg: RunConfig, log_fn=None) -> list[dict]:
    """Stage-1 {point, gaussian} x {neg off, on} plus stage-2 beta sweep."""
    rows = []
    for mode in ("point", "gaussian"):
        for neg in (False, True):
            c = ablation_stage1_config(cfg, mode, neg)
            suite = build_suite(c)
            _, recs = train_stage1(c, suite)
            rec = recs[-1]
            rows.append({"name": f"{mode}_{'neg' if neg else 'noneg'}",
                         "recall": rec["recall"], "precision": rec["precision"],
                         "iou": rec["iou"], "miou": 0.0})
            if log_fn:
                log_fn(rows[-1])
    for beta in (0.0, 0.5, 1.0):
        c = ablation_stage2_config(cfg, beta)
        suite = build_suite(c)
        _, recs = train_stage2(c, suite)
        rec = recs[-1]
        rows.append({"name": f"beta_{beta}", "recall": rec["recall"],
                     "precision": rec["precision"], "iou": rec["iou"],
                     "miou": rec["miou"]})
        if log_fn:
            log_fn(rows[-1])
    return rows


def ablation_csv(rows: list[dict]) -> str:
    lines = ["name,recall,precision,iou,miou"]
    for r in rows:
        lines.append(f"{r['name']},{r['recall']:.6f},{r['precision']:.6f},"
                     f"{r['iou']:.6f},{r['miou']:.6f}")
    return "\n".join(lines) + "\n"


def _clone_cfg(cfg: RunConfig) -> RunConfig:
    import copy
    return copy.deepcopy(cfg)
