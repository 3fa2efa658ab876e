"""Salient-object metrics: max F-measure, MAE, S-measure, E-measure, IoU.

All functions take a soft prediction in [0, 1] and a binary ground truth of
the same shape.  Threshold sweeps use the 256 levels k/255 and binarise with
``pred >= t``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

BETA2 = 0.3
EPS = 1e-8
THRESHOLDS = np.arange(256) / 255.0
CSV_FIELDS = ("dataset", "n", "f_max", "s_measure", "e_measure", "mae", "iou", "mode")


def _prep(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _threshold_counts(pred, gt):
    """Predicted-positive and true-positive counts at every threshold."""
    # bin index k such that pred >= k/255 holds for all k <= level
    level = np.floor(pred * 255.0 + 1e-9).astype(np.int64).clip(0, 255)
    hist_all = np.bincount(level.ravel(), minlength=256)
    hist_fg = np.bincount(level[gt].ravel(), minlength=256)
    pos = np.cumsum(hist_all[::-1])[::-1]
    tp = np.cumsum(hist_fg[::-1])[::-1]
    return pos, tp


def f_measure_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    pos, tp = _threshold_counts(pred, gt)
    n_gt = gt.sum()
    precision = np.divide(tp, pos, out=np.zeros(256), where=pos > 0)
    recall = tp / n_gt if n_gt > 0 else np.zeros(256)
    denom = beta2 * precision + recall
    return np.divide((1 + beta2) * precision * recall, denom, out=np.zeros(256), where=denom > 0)


def f_measure_max(pred, gt, beta2: float = BETA2) -> float:
    return float(f_measure_curve(pred, gt, beta2).max())


def iou_binary(pred, gt, threshold: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    b = pred >= threshold
    union = np.logical_or(b, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(b, gt).sum() / union)


# S-measure ---------------------------------------------------------------

def _std(x):
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _object_score(x):
    if x.size == 0:
        return 0.0
    mu = float(np.mean(x))
    return 2.0 * mu / (mu * mu + 1.0 + _std(x) + EPS)


def _ssim(pred, gt):
    n = pred.size
    mx, my = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = float(((pred - mx) ** 2).sum() / d)
    sy = float(((gt - my) ** 2).sum() / d)
    sxy = float(((pred - mx) * (gt - my)).sum() / d)
    num = 4.0 * mx * my * sxy
    den = (mx * mx + my * my) * (sx + sy)
    # exact ratio: the vanishing cases carry their own conventions, and an
    # absolute epsilon would dominate quadrants holding a few pixels
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


def _centroid_split(gt):
    h, w = gt.shape
    rows, cols = np.nonzero(gt)
    # round half up, then include the centroid row/column in the upper-left part
    y = int(np.floor(rows.mean() + 0.5)) + 1
    x = int(np.floor(cols.mean() + 0.5)) + 1
    return min(y, h), min(x, w)


def s_object(pred, gt) -> float:
    mu = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return mu * fg + (1.0 - mu) * bg


def s_region(pred, gt) -> float:
    h, w = gt.shape
    y, x = _centroid_split(gt)
    gtf = gt.astype(np.float64)
    total = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        p, g = pred[rs, cs], gtf[rs, cs]
        if p.size == 0:
            continue
        total += p.size / (h * w) * _ssim(p, g)
    return total


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    mu = gt.mean()
    if mu == 0:
        score = 1.0 - pred.mean()
    elif mu == 1:
        score = pred.mean()
    else:
        score = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


# E-measure ---------------------------------------------------------------

def _enhanced_score(binary, gt) -> float:
    mu = gt.mean()
    if mu == 0:
        return 1.0 - binary.mean()
    if mu == 1:
        return binary.mean()
    phi_gt = gt - mu
    phi_p = binary - binary.mean()
    align = 2.0 * phi_gt * phi_p / (phi_gt ** 2 + phi_p ** 2 + EPS)
    return float(np.mean((align + 1.0) ** 2 / 4.0))


def e_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    gtf = gt.astype(np.float64)
    level = np.floor(pred * 255.0 + 1e-9).astype(np.int64).clip(0, 255)
    return np.array([_enhanced_score((level >= k).astype(np.float64), gtf) for k in range(256)])


def e_measure(pred, gt, variant: str = "mean") -> float:
    """Mean over thresholds by default; ``max`` and ``adaptive`` variants on request."""
    if variant == "adaptive":
        pred, gt = _prep(pred, gt)
        t = min(2.0 * pred.mean(), 1.0)
        return _enhanced_score((pred >= t).astype(np.float64), gt.astype(np.float64))
    curve = e_measure_curve(pred, gt)
    if variant == "mean":
        return float(curve.mean())
    if variant == "max":
        return float(curve.max())
    raise ValueError(f"unknown E-measure variant {variant!r}")


# dataset evaluation --------------------------------------------------------

@dataclass
class MetricsReport:
    f_max: float
    mae: float
    s_measure: float
    e_measure: float
    iou: float
    n: int
    mode: str = "selected"
    dataset: str = "dataset"
    per_sample: list[dict] = field(default_factory=list)
    oracle: dict | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}

    def to_json(self, include_samples: bool = False) -> str:
        d = asdict(self)
        if not include_samples:
            d.pop("per_sample")
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in self.row().items()})
        return buf.getvalue()


def sample_metrics(pred, gt, e_variant: str = "mean") -> dict:
    return {
        "f_max": f_measure_max(pred, gt),
        "mae": mae(pred, gt),
        "s_measure": s_measure(pred, gt),
        "e_measure": e_measure(pred, gt, e_variant),
        "iou": iou_binary(pred, gt),
    }


def choose_branch(masks, gt, scores=None, mode: str = "selected") -> int:
    """Branch used for evaluation: best predicted score, or best IoU (oracle)."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        return 0
    if mode == "selected":
        if scores is None:
            raise ValueError("selected mode needs predicted scores")
        return int(np.argmax(scores))
    if mode == "oracle_best":
        return int(np.argmax([iou_binary(m, gt) for m in masks]))
    raise ValueError(f"unknown mode {mode!r}")


def evaluate_dataset(predictions, ground_truths, mode: str = "selected", scores=None,
                     dataset: str = "dataset", e_variant: str = "mean") -> MetricsReport:
    """Average per-sample metrics.

    ``predictions`` holds (H,W) masks or (N,H,W) multi-mask stacks; ``scores``
    the matching (N,) predicted IoUs, needed in ``selected`` mode.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths differ in length")
    if not len(predictions):
        raise ValueError("empty dataset")
    records = []
    for i, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        s = None if scores is None else scores[i]
        branch = choose_branch(pred, gt, s, mode)
        mask = np.asarray(pred) if np.ndim(pred) == 2 else np.asarray(pred)[branch]
        rec = sample_metrics(mask, gt, e_variant)
        rec["index"] = i
        rec["branch"] = branch
        records.append(rec)
    agg = {k: float(np.mean([r[k] for r in records])) for k in ("f_max", "mae", "s_measure", "e_measure", "iou")}
    return MetricsReport(n=len(records), mode=mode, dataset=dataset, per_sample=records, **agg)
