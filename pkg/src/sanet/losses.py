"""Losses, the poly schedule, mIoU and a finite-difference gradient checker.

Logits are ``1 x C x H x W`` tensors and labels are ``(H, W)`` class maps
with an ignore sentinel. Loss values are computed in float64.
"""

from dataclasses import dataclass, field
from typing import Dict, NamedTuple

import numpy as np

from .tensor import IGNORE, ShapeError, check_class_map, check_tensor4


@dataclass(frozen=True)
class LossConfig:
    ignore_value: int = IGNORE
    ohem_threshold: float = 0.7
    ohem_min_kept: int = None  # None: 1/16 of the pixels
    weights: Dict[str, float] = field(default_factory=lambda: {"main": 1.0, "aux": 0.4, "boundary": 1.0})

    def __post_init__(self):
        if not 0 < self.ohem_threshold < 1:
            raise ValueError(f"ohem_threshold must lie in (0, 1), got {self.ohem_threshold}")
        if self.ohem_min_kept is not None and self.ohem_min_kept < 1:
            raise ValueError(f"ohem_min_kept must be >= 1, got {self.ohem_min_kept}")
        if any(v < 0 for v in self.weights.values()):
            raise ValueError(f"loss weights must be non-negative, got {self.weights}")

    def min_kept(self, num_pixels):
        return max(1, num_pixels // 16) if self.ohem_min_kept is None else self.ohem_min_kept


def _logits_labels(logits, labels, ignore):
    logits = check_tensor4(logits, "logits")
    if logits.shape[0] != 1:
        raise ShapeError(f"losses take batch size 1, got {logits.shape[0]}")
    labels = check_class_map(labels, logits.shape[1], ignore)
    if labels.shape != logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape[2:]}")
    return logits[0].astype(np.float64), labels


def pixel_cross_entropy(logits, labels, ignore=IGNORE):
    """Per-pixel CE and true-class probability over the non-ignored pixels."""
    z, labels = _logits_labels(logits, labels, ignore)
    valid = labels != ignore
    z = z[:, valid]  # C x P
    z = z - z.max(axis=0)
    logp = z - np.log(np.exp(z).sum(axis=0))
    lp_true = logp[labels[valid], np.arange(z.shape[1])]
    return -lp_true, np.exp(lp_true)


def cross_entropy(logits, labels, ignore=IGNORE):
    """Mean CE over non-ignored pixels; 0.0 when every pixel is ignored."""
    ce, _ = pixel_cross_entropy(logits, labels, ignore)
    return float(ce.mean()) if ce.size else 0.0


def ohem_cross_entropy(logits, labels, cfg: LossConfig = LossConfig()):
    """CE over pixels whose true-class probability is below the threshold.

    When fewer than ``min_kept`` pixels qualify, the ``min_kept`` highest-loss
    pixels are used instead.
    """
    ce, p_true = pixel_cross_entropy(logits, labels, cfg.ignore_value)
    if ce.size == 0:
        return 0.0
    hard = p_true < cfg.ohem_threshold
    k = min(cfg.min_kept(ce.size), ce.size)
    if hard.sum() >= k:
        return float(ce[hard].mean())
    # stable sort keeps the choice deterministic among equal losses
    kept = np.argsort(-ce, kind="stable")[:k]
    return float(ce[kept].mean())


def boundary_targets(labels, ignore=IGNORE):
    """1 where a 4-neighbour carries a different non-ignored label, else 0.

    Ignored pixels stay ``ignore`` and never make a neighbour a boundary.
    """
    labels = check_class_map(labels, ignore=ignore)
    out = np.zeros(labels.shape, np.int32)
    valid = labels != ignore
    for a, b in ((np.s_[1:, :], np.s_[:-1, :]), (np.s_[:, 1:], np.s_[:, :-1])):
        diff = (labels[a] != labels[b]) & valid[a] & valid[b]
        out[a] |= diff
        out[b] |= diff
    out[~valid] = ignore
    return out


def boundary_loss(boundary_logits, targets, ignore=IGNORE):
    """Class-balanced BCE: positives weighted by #neg/#pos, mean over valid pixels.

    With no positive pixel the weighting is undefined and plain BCE is used.
    """
    z = check_tensor4(boundary_logits, "boundary_logits")
    if z.shape[:2] != (1, 1):
        raise ShapeError(f"boundary logits must be 1 x 1 x H x W, got {z.shape}")
    targets = np.asarray(targets)
    if targets.shape != z.shape[2:]:
        raise ShapeError(f"targets {targets.shape} do not match logits {z.shape[2:]}")
    valid = targets != ignore
    if not valid.any():
        return 0.0
    z = z[0, 0][valid].astype(np.float64)
    t = targets[valid] == 1
    pos, neg = int(t.sum()), int((~t).sum())
    w_pos = neg / pos if pos else 1.0
    # -log(sigmoid(z)) = log(1 + e^-z), -log(1 - sigmoid(z)) = log(1 + e^z)
    loss = np.where(t, w_pos * np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    return float(loss.mean())


def total_loss(outputs, labels, cfg: LossConfig = LossConfig()):
    """Weighted sum of OHEM CE on main and aux logits plus the boundary loss.

    ``outputs`` is a training-mode :class:`Outputs`; a missing head skips its term.
    """
    terms = {"main": ohem_cross_entropy(outputs.out, labels, cfg)}
    if outputs.aux is not None:
        terms["aux"] = ohem_cross_entropy(outputs.aux, labels, cfg)
    if outputs.boundary is not None:
        terms["boundary"] = boundary_loss(outputs.boundary, boundary_targets(labels, cfg.ignore_value),
                                          cfg.ignore_value)
    return sum(cfg.weights[k] * v for k, v in terms.items()), terms


def poly_lr(base, it, max_it, power=0.9):
    if not 0 <= it <= max_it or max_it <= 0:
        raise ValueError(f"poly_lr needs 0 <= iter <= max_iter, got iter={it}, max_iter={max_it}")
    return base * (1 - it / max_it) ** power


class MiouResult(NamedTuple):
    iou: np.ndarray  # per class; NaN where the class is absent from pred and labels
    mean: float
    confusion: np.ndarray  # rows: label, cols: prediction


def confusion_matrix(pred, labels, num_classes, ignore=IGNORE):
    pred = check_class_map(pred, num_classes, ignore, "pred")
    labels = check_class_map(labels, num_classes, ignore)
    if pred.shape != labels.shape:
        raise ShapeError(f"pred {pred.shape} and labels {labels.shape} differ")
    keep = (labels != ignore) & (pred != ignore)
    idx = labels[keep].astype(np.int64) * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred, labels, num_classes, ignore=IGNORE, confusion=None):
    """Per-class IoU and their mean over classes present in pred or labels."""
    cm = confusion_matrix(pred, labels, num_classes, ignore) if confusion is None else confusion
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = ~np.isnan(iou)
    return MiouResult(iou, float(iou[present].mean()) if present.any() else float("nan"), cm)


class FdReport(NamedTuple):
    max_abs: Dict[str, float]
    max_rel: Dict[str, float]
    coords: Dict[str, int]

    @property
    def worst_rel(self):
        return max(self.max_rel.values(), default=0.0)


def finite_diff_check(eval_fn, params, analytic, eps=1e-3, n_coords=64, rng=None):
    """Compare analytic gradients with central differences.

    ``params`` maps names to float64 arrays; ``eval_fn(params)`` returns a
    scalar. Up to ``n_coords`` coordinates per tensor are probed (all of them
    for smaller tensors). Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    rng = np.random.default_rng(rng)
    params = {k: np.array(v, np.float64) for k, v in params.items()}
    max_abs, max_rel, coords = {}, {}, {}
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= n_coords else rng.choice(flat.size, n_coords, replace=False)
        g = np.asarray(analytic[name], np.float64).reshape(-1)
        worst_abs = worst_rel = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_fn(params)
            flat[i] = orig - eps
            f_minus = eval_fn(params)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            err = abs(g[i] - num)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(g[i]), abs(num), 1e-8))
        max_abs[name], max_rel[name], coords[name] = worst_abs, worst_rel, len(idx)
    return FdReport(max_abs, max_rel, coords)
