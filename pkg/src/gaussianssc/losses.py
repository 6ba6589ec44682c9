"""Training objectives and evaluation metrics.

Stage-1 occupancy uses a class-balanced cross-entropy *sum* with weak
log-scale / offset regularizers and hard negative sampling; Stage-2
semantics use a class-weighted cross-entropy *mean* plus a structure
loss pushing soft per-class precision/recall/specificity toward 1.  The
sum/mean asymmetry between stages is deliberate and preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ConfigError
from .geometry import UNKNOWN

_TINY = 1e-300
_EPS = 1e-12


def balanced_bce_occupancy(probs: Tensor, labels: np.ndarray, mask: np.ndarray,
                           w0: float, w1: float) -> Tensor:
    """-sum over valid voxels of w1*1[o=1]*log p + w0*1[o=0]*log(1-p)."""
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ConfigError("balanced_bce_occupancy: empty valid set")
    p = T.reshape(probs, (-1,))
    pos = (mask & labels).astype(np.float64)
    neg = (mask & ~labels).astype(np.float64)
    logp = T.log(T.clip(p, _TINY, 1.0))
    logq = T.log(T.clip(1.0 - p, _TINY, 1.0))
    return -(w1 * T.tsum(logp * Tensor(pos)) + w0 * T.tsum(logq * Tensor(neg)))


def sigma_reg(sigma: Tensor, sigma0: float) -> Tensor:
    """sum ||log sigma - log sigma0||^2 over the given anchors."""
    d = T.log(sigma) - float(np.log(sigma0))
    return T.tsum(d * d)


def delta_reg(delta: Tensor) -> Tensor:
    """sum ||delta||_1 over the given anchors."""
    return T.tsum(T.absval(delta))


def negative_sample(labels: np.ndarray, mask: np.ndarray, ratio: float,
                    seed: int, floor: int = 256) -> np.ndarray:
    """Keep all positives plus a seeded uniform sample of negatives.

    With zero positives, min(round(ratio * floor), N_neg) negatives keep
    gradients flowing.
    """
    if ratio <= 0:
        raise ConfigError(f"negative sampling ratio must be > 0, got {ratio}")
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    pos = mask & labels
    neg_idx = np.flatnonzero(mask & ~labels)
    n_pos = int(pos.sum())
    want = int(round(ratio * (n_pos if n_pos > 0 else floor)))
    n_keep = min(want, neg_idx.size)
    out = pos.copy()
    if n_keep > 0:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(neg_idx.size, size=n_keep, replace=False)
        out[neg_idx[np.sort(chosen)]] = True
    return out


def weighted_ce_semantic(logits: Tensor, labels: np.ndarray, mask: np.ndarray,
                         class_weights: np.ndarray) -> Tensor:
    """Mean over valid voxels of w_{y} * CE(softmax(z), y)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ConfigError("weighted_ce_semantic: empty valid set")
    if np.any(labels[mask] == UNKNOWN):
        raise ConfigError("weighted_ce_semantic: UNKNOWN label inside mask")
    c = logits.shape[-1]
    ls = T.log_softmax(T.reshape(logits, (-1, c)), axis=-1)
    safe = np.where(mask, labels, 0)
    rows = np.arange(labels.size)
    picked = T.take2d(T.reshape(ls, (labels.size, c, 1)), rows, safe)  # (N, 1)
    wv = np.asarray(class_weights, dtype=np.float64)[safe] * mask
    total = T.tsum(T.reshape(picked, (-1,)) * Tensor(wv))
    return -total * (1.0 / mask.sum())


def sem_scal(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Average over evaluable classes of -log of soft precision, recall,
    and specificity (ratio-of-sums relaxation over softmax masses).

    A class is evaluable when both it and its complement appear in the
    valid ground truth; all three ratios are then well defined.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    c = logits.shape[-1]
    probs = T.softmax(T.reshape(logits, (-1, c)), axis=-1)
    n_valid = int(mask.sum())
    terms = []
    for cls in range(c):
        gt = ((labels == cls) & mask).astype(np.float64)
        n_gt = gt.sum()
        if n_gt == 0 or n_gt == n_valid:
            continue
        pc = T.reshape(T.take2d(T.reshape(probs, (labels.size, c, 1)),
                                np.arange(labels.size),
                                np.full(labels.size, cls)), (-1,))
        pc = pc * Tensor(mask.astype(np.float64))
        tp = T.tsum(pc * Tensor(gt))
        pred = T.tsum(pc)
        tn = T.tsum((Tensor(mask.astype(np.float64)) - pc) * Tensor(mask.astype(np.float64) - gt))
        prec = T.div(tp, T.clip(pred, _EPS, np.inf))
        rec = tp * (1.0 / n_gt)
        spec = tn * (1.0 / (n_valid - n_gt))
        for ratio in (prec, rec, spec):
            terms.append(-T.log(T.clip(ratio, _EPS, np.inf)))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / (len(terms) // 3))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN/TN over valid voxels."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    num_classes: int

    def iou(self, c: int) -> float:
        den = self.tp[c] + self.fp[c] + self.fn[c]
        return float(self.tp[c] / den) if den > 0 else 0.0

    def precision(self, c: int) -> float:
        den = self.tp[c] + self.fp[c]
        return float(self.tp[c] / den) if den > 0 else 0.0

    def recall(self, c: int) -> float:
        den = self.tp[c] + self.fn[c]
        return float(self.tp[c] / den) if den > 0 else 0.0

    def miou(self) -> float:
        """Mean IoU over semantic classes 1..C-1 (empty class excluded);
        classes absent from both GT and prediction count as 0."""
        if self.num_classes < 2:
            return 0.0
        return float(np.mean([self.iou(c) for c in range(1, self.num_classes)]))


def confusion(pred_labels: np.ndarray, gt_labels: np.ndarray,
              valid_mask: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    valid = np.asarray(valid_mask, dtype=bool).reshape(-1)
    pred = pred[valid]
    gt = gt[valid]
    n = gt.size
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    tn = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        pc = pred == c
        gc = gt == c
        tp[c] = np.sum(pc & gc)
        fp[c] = np.sum(pc & ~gc)
        fn[c] = np.sum(~pc & gc)
        tn[c] = n - tp[c] - fp[c] - fn[c]
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn, num_classes=num_classes)


def occupancy_metrics(pred_occ: np.ndarray, gt_occ: np.ndarray,
                      valid_mask: np.ndarray) -> dict:
    """Binary completion metrics: IoU / precision / recall of occupancy."""
    cc = confusion(np.asarray(pred_occ, dtype=np.int64),
                   np.asarray(gt_occ, dtype=np.int64), valid_mask, 2)
    return {"iou": cc.iou(1), "precision": cc.precision(1), "recall": cc.recall(1)}


def metrics_record(step: int, split: str, pred_labels: np.ndarray,
                   gt_labels: np.ndarray, valid_mask: np.ndarray,
                   num_classes: int) -> dict:
    """The JSON-lines evaluation record shared by train/eval/ablate."""
    occ = occupancy_metrics(np.asarray(pred_labels) > 0, np.asarray(gt_labels) > 0,
                            valid_mask)
    cc = confusion(pred_labels, gt_labels, valid_mask, num_classes)
    return {
        "step": int(step),
        "split": split,
        "iou": occ["iou"],
        "precision": occ["precision"],
        "recall": occ["recall"],
        "miou": cc.miou(),
        "per_class_iou": [cc.iou(c) for c in range(num_classes)],
    }


def write_jsonl(path, records) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
