"""Winner-take-all training objective for multi-mask prediction.

Every loss is built as a diffcore graph over (B, N, H, W) soft masks so that
training and the scalar helpers below share one code path.  The scalar
helpers take plain arrays: ``m`` is a soft mask (any shape), ``y`` a binary
mask of the same shape.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc

FOCAL_VARIANTS = ("symmetric", "one-term")
WINNER_RULES = ("max_iou", "min_iou", "max_score")


@dataclass
class LossConfig:
    tau_focal: float = 2.0
    lambda_mask: float = 10.0
    lambda_score: float = 0.05
    lambda_reg: float = 0.1
    gamma: float = 0.2
    focal_variant: str = "symmetric"
    normalize_focal: bool = False
    winner_rule: str = "max_iou"
    reg_includes_winner: bool = True
    score_target: str = "soft"  # or "binary"

    def __post_init__(self):
        for name in ("tau_focal", "lambda_mask", "lambda_score", "lambda_reg", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.focal_variant not in FOCAL_VARIANTS:
            raise ValueError(f"focal_variant must be one of {FOCAL_VARIANTS}")
        if self.winner_rule not in WINNER_RULES:
            raise ValueError(f"winner_rule must be one of {WINNER_RULES}")
        if self.score_target not in ("soft", "binary"):
            raise ValueError("score_target must be 'soft' or 'binary'")

    def to_dict(self):
        return asdict(self)

    def decay(self, epoch: int) -> float:
        return self.lambda_reg * math.exp(-self.gamma * epoch)


@dataclass
class ObjectiveBreakdown:
    total: float
    winner: int
    mask_losses: np.ndarray
    score_losses: np.ndarray
    regularizer: float


# graph builders -------------------------------------------------------------

def _pixel_axes(x: dc.Expr):
    return tuple(range(len(x.shape) - 2, len(x.shape)))


def clamp_mask(m: dc.Expr) -> dc.Expr:
    return dc.clamp(m, dc.LOSS_EPS, 1.0 - dc.LOSS_EPS)


def soft_iou_expr(m: dc.Expr, y) -> dc.Expr:
    """Sum over the two trailing axes of m*y / (m + y - m*y)."""
    axes = _pixel_axes(m)
    inter = m * y
    union = m + y - inter
    return dc.reduce_sum(inter, axis=axes) / dc.reduce_sum(union, axis=axes)


def focal_expr(m: dc.Expr, y, cfg: LossConfig) -> dc.Expr:
    axes = _pixel_axes(m)
    m = clamp_mask(m)
    fg = dc.power(1.0 - m, cfg.tau_focal) * y * dc.log(m)
    per_pixel = fg
    if cfg.focal_variant == "symmetric":
        per_pixel = fg + dc.power(m, cfg.tau_focal) * (1.0 - y) * dc.log(1.0 - m)
    total = -dc.reduce_sum(per_pixel, axis=axes)
    if cfg.normalize_focal:
        n = int(np.prod([m.shape[a] for a in axes]))
        total = total * (1.0 / n)
    return total


def mask_loss_expr(m: dc.Expr, y, cfg: LossConfig) -> dc.Expr:
    return cfg.lambda_mask * focal_expr(m, y, cfg) + (1.0 - soft_iou_expr(m, y))


def score_loss_expr(s: dc.Expr, m: dc.Expr, y) -> dc.Expr:
    diff = s - soft_iou_expr(m, y)
    return diff * diff


def batch_objective_expr(masks: dc.Expr, scores: dc.Expr, y: dc.Expr, coef: dc.Expr,
                         cfg: LossConfig, score_target: dc.Expr | None = None) -> dc.Expr:
    """Batch-mean objective.

    masks (B,N,H,W), scores (B,N), y (B,1,H,W); ``coef`` (B,N) holds the
    per-branch mask-loss weights (winner one-hot plus decayed regulariser).
    ``score_target`` replaces the soft IoU target when given (binary mode).
    """
    per_mask = mask_loss_expr(masks, y, cfg)
    if score_target is None:
        diff = scores - soft_iou_expr(masks, y)
    else:
        diff = scores - score_target
    per_score = diff * diff
    per_sample = dc.reduce_sum(coef * per_mask + cfg.lambda_score * per_score, axis=1)
    return dc.reduce_mean(per_sample)


def branch_coefficients(winners: np.ndarray, n_heads: int, epoch: int, cfg: LossConfig,
                        dtype=np.float64) -> np.ndarray:
    coef = np.full((len(winners), n_heads), cfg.decay(epoch), dtype=dtype)
    rows = np.arange(len(winners))
    if cfg.reg_includes_winner:
        coef[rows, winners] += 1.0
    else:
        coef[rows, winners] = 1.0
    return coef


# scalar helpers ---------------------------------------------------------------

def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _eval(build, *arrays):
    names = [f"a{i}" for i in range(len(arrays))]
    vs = [dc.var(n, np.shape(a)) for n, a in zip(names, arrays)]
    return float(dc.evaluate(build(*vs), dict(zip(names, arrays))))


def _flat2(a):
    a = _as_f64(a)
    return a.reshape(1, -1) if a.ndim < 2 else a


def soft_iou(m, y) -> float:
    m, y = _flat2(m), _flat2(y)
    if m.shape != y.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {y.shape}")
    union = np.sum(m + y - m * y)
    if union == 0:
        return 1.0
    return _eval(soft_iou_expr, m, y)


def focal_loss(m, y, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    m, y = _flat2(m), _flat2(y)
    if m.shape != y.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {y.shape}")
    return _eval(lambda a, b: focal_expr(a, b, cfg), m, y)


def iou_loss(m, y) -> float:
    return 1.0 - soft_iou(m, y)


def mask_loss(m, y, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    return cfg.lambda_mask * focal_loss(m, y, cfg) + iou_loss(m, y)


def score_loss(s: float, m, y) -> float:
    return (float(s) - soft_iou(m, y)) ** 2


def branch_ious(masks, y) -> np.ndarray:
    """Soft IoU of each branch: masks (N,H,W) or (B,N,H,W), y (H,W) or (B,H,W)."""
    masks = _as_f64(masks)
    y = _as_f64(y)
    if masks.ndim == 3:
        return branch_ious(masks[None], y[None])[0]
    y = y[:, None]
    inter = (masks * y).sum(axis=(2, 3))
    union = (masks + y - masks * y).sum(axis=(2, 3))
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)


def select_winner(masks, y, scores=None, rule: str = "max_iou") -> int | np.ndarray:
    """Index of the branch that receives the main loss (lowest index on ties)."""
    ious = branch_ious(masks, y)
    if rule == "max_iou":
        return np.argmax(ious, axis=-1)
    if rule == "min_iou":
        return np.argmin(ious, axis=-1)
    if rule == "max_score":
        if scores is None:
            raise ValueError("max_score rule needs predicted scores")
        return np.argmax(np.asarray(scores), axis=-1)
    raise ValueError(f"unknown winner rule {rule!r}")


def total_objective(masks, scores, y, epoch: int, cfg: LossConfig | None = None) -> ObjectiveBreakdown:
    """Objective for one sample: masks (N,H,W), scores (N,), y (H,W)."""
    cfg = cfg or LossConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    masks, scores, y = _as_f64(masks), _as_f64(scores), _as_f64(y)
    winner = int(select_winner(masks, y, scores, cfg.winner_rule))
    mvar = dc.var("m", masks.shape)
    yvar = dc.var("y", (1,) + y.shape)
    svar = dc.var("s", scores.shape)
    per_mask_e = mask_loss_expr(mvar, yvar, cfg)
    per_score_e = score_loss_expr(svar, mvar, yvar)
    per_mask, per_score = dc.evaluate([per_mask_e, per_score_e],
                                      {"m": masks, "y": y[None], "s": scores})
    decay = cfg.decay(epoch)
    if cfg.reg_includes_winner:
        reg = decay * per_mask.sum()
    else:
        reg = decay * (per_mask.sum() - per_mask[winner])
    total = float(per_mask[winner] + cfg.lambda_score * per_score.sum() + reg)
    return ObjectiveBreakdown(total, winner, per_mask, per_score, float(reg))
