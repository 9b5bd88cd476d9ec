"""Soft precision/recall, the adaptive balance loss, network losses and hard metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import LossConfig
from .tensor import ShapeError, Tensor

IMAGE_AXES = (1, 2, 3)


def _check_pair(y, y_hat) -> tuple[Tensor, Tensor]:
    y, y_hat = T._as_tensor(y), T._as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"prediction {y.shape} and ground truth {y_hat.shape} differ")
    return y, y_hat


def soft_pr(y, y_hat, eps: float = 1e-6, axis=None) -> Tensor:
    """Soft precision (sum(y*y_hat) + eps) / (sum(y) + eps), clamped to [eps, 1].

    ``y`` is the predicted map and ``y_hat`` the ground truth.  With ``axis``
    the sums run over those axes only (e.g. per image).
    """
    y, y_hat = _check_pair(y, y_hat)
    hit = (y * y_hat).sum(axis)
    return T.clamp((hit + eps) / (y.sum(axis) + eps), eps, 1.0)


def soft_re(y, y_hat, eps: float = 1e-6, axis=None) -> Tensor:
    """Soft recall (sum(y*y_hat) + eps) / (sum(y_hat) + eps), clamped to [eps, 1]."""
    y, y_hat = _check_pair(y, y_hat)
    hit = (y * y_hat).sum(axis)
    return T.clamp((hit + eps) / (y_hat.sum(axis) + eps), eps, 1.0)


def adaptive_balance_loss(pr, re, gamma: int = 3) -> Tensor:
    """-(1-pr)^gamma log(pr) - (1-re)^gamma log(re); gamma=0 gives -log pr - log re."""
    pr, re = T._as_tensor(pr), T._as_tensor(re)
    for name, v in (("precision", pr), ("recall", re)):
        if np.any(v.data <= 0) or np.any(v.data > 1):
            raise ValueError(f"{name} must lie in (0, 1]")
    if gamma == 0:
        return -T.log(pr) - T.log(re)
    return -(T.power(1.0 - pr, gamma) * T.log(pr)) - T.power(1.0 - re, gamma) * T.log(re)


def balance_term(y, y_hat, cfg: LossConfig) -> Tensor:
    """Per-image adaptive balance loss averaged over the batch."""
    pr = soft_pr(y, y_hat, cfg.epsilon, IMAGE_AXES)
    re = soft_re(y, y_hat, cfg.epsilon, IMAGE_AXES)
    return adaptive_balance_loss(pr, re, cfg.gamma).mean()


def neg_log_confidence(c=None, eps: float = 1e-6, logit=None) -> Tensor:
    """-log(c) per sample.

    Given the jury ``logit`` z (with c = sigmoid(z)) this is softplus(-z),
    which keeps its gradient however confident the jury is.  Given only the
    probability it is -log(clamp(c, eps, 1)).
    """
    if logit is not None:
        return T.softplus(-T._as_tensor(logit))
    if c is None:
        raise ValueError("need a confidence or a logit")
    return -T.log(T.clamp(T._as_tensor(c), eps, 1.0))


def prosecution_loss(y_p, y_hat, c_p=None, cfg: LossConfig = LossConfig(), c_logit=None) -> Tensor:
    """abl_weight * L_abl(y_p, y_hat) - log(c_p), batch averaged."""
    return cfg.abl_weight * balance_term(y_p, y_hat, cfg) + neg_log_confidence(c_p, cfg.epsilon, c_logit).mean()


def defendant_loss(y_d, y_hat, c_d=None, cfg: LossConfig = LossConfig(), c_logit=None) -> Tensor:
    """Same form as :func:`prosecution_loss`, applied to the defendant output."""
    return cfg.abl_weight * balance_term(y_d, y_hat, cfg) + neg_log_confidence(c_d, cfg.epsilon, c_logit).mean()


def jury_loss(confidence, y_star: float, eps: float = 1e-6, logit=None) -> Tensor:
    """Binary cross entropy of the jury confidence against label ``y_star`` in {0, 1}.

    With ``logit`` the loss is evaluated as softplus(-z) or softplus(z),
    equal to the clamped form wherever the clamp is inactive.
    """
    if y_star not in (0, 1):
        raise ValueError("y_star must be 0 or 1")
    if logit is not None:
        z = T._as_tensor(logit)
        return T.softplus(-z).mean() if y_star == 1 else T.softplus(z).mean()
    c = T.clamp(T._as_tensor(confidence), eps, 1.0 - eps)
    if y_star == 1:
        return -T.log(c).mean()
    return -T.log(1.0 - c).mean()


# ---------------------------------------------------------------------------
# hard metrics
# ---------------------------------------------------------------------------
def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def confusion_counts(pred_mask, gt_mask) -> tuple[int, int, int]:
    pred, gt = _binary(pred_mask, "prediction"), _binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def metrics_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        # no targets: a silent prediction recalls everything there is
        recall = 1.0 if tp + fp == 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def hard_metrics(pred_mask, gt_mask) -> tuple[float, float, float]:
    """Pixel precision, recall and F1 of a binary prediction."""
    return metrics_from_counts(*confusion_counts(pred_mask, gt_mask))


@dataclass
class MetricsReport:
    image_ids: list[str] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    threshold: float = 0.5
    aggregate: str = "per_image"
    pooled: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def mean_precision(self) -> float:
        return self._mean(self.precision, 0)

    @property
    def mean_recall(self) -> float:
        return self._mean(self.recall, 1)

    @property
    def mean_f1(self) -> float:
        return self._mean(self.f1, 2)

    def _mean(self, values: list[float], pooled_index: int) -> float:
        if self.aggregate == "pooled":
            return self.pooled[pooled_index]
        return float(np.mean(values)) if values else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "precision", "recall", "f1"])
            for row in zip(self.image_ids, self.precision, self.recall, self.f1):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
            w.writerow(["MEAN", repr(self.mean_precision), repr(self.mean_recall), repr(self.mean_f1)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsReport":
        report = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["image_id", "precision", "recall", "f1"]:
            raise ValueError(f"{path}: not a metrics report")
        for row in rows[1:]:
            if row[0] == "MEAN":
                continue
            report.image_ids.append(row[0])
            report.precision.append(float(row[1]))
            report.recall.append(float(row[2]))
            report.f1.append(float(row[3]))
        return report


def dataset_metrics(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
    threshold: float = 0.5,
    image_ids: Sequence[str] | None = None,
    aggregate: str = "per_image",
) -> MetricsReport:
    """Per-image metrics over (prediction, ground truth) pairs plus their means.

    ``aggregate="pooled"`` reports the metrics of the summed pixel counts as
    the dataset value instead of the per-image average.
    """
    if aggregate not in ("per_image", "pooled"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    report = MetricsReport(threshold=threshold, aggregate=aggregate)
    totals = np.zeros(3, dtype=np.int64)
    for i, (pred, gt) in enumerate(pairs):
        counts = confusion_counts(pred, gt)
        totals += counts
        p, r, f = metrics_from_counts(*counts)
        report.image_ids.append(str(image_ids[i]) if image_ids is not None else str(i))
        report.precision.append(p)
        report.recall.append(r)
        report.f1.append(f)
    report.pooled = metrics_from_counts(*(int(v) for v in totals))
    return report
