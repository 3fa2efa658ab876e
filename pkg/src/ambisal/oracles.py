"""Slow reference implementations of the metric formulas.

Written independently of :mod:`ambisal.metrics` (explicit loops, no
histogram tricks) and used only to cross-check it.
"""
from __future__ import annotations

import math

import numpy as np

BETA2 = 0.3
EPS = 1e-8


def _pixels(a):
    a = np.asarray(a, dtype=np.float64)
    return [float(v) for v in a.ravel()]


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    total = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += abs(pred[i, j] - gt[i, j])
    return total / pred.size


def f_measure_max(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt) > 0.5
    best = 0.0
    for k in range(256):
        b = p >= k / 255.0
        tp = int(np.sum(b & g))
        npos = int(np.sum(b))
        ngt = int(np.sum(g))
        prec = tp / npos if npos else 0.0
        rec = tp / ngt if ngt else 0.0
        den = BETA2 * prec + rec
        f = (1 + BETA2) * prec * rec / den if den > 0 else 0.0
        best = max(best, f)
    return best


def iou_binary(pred, gt, threshold=0.5) -> float:
    inter = union = 0
    for p, g in zip(_pixels(pred), _pixels(gt)):
        a, b = p >= threshold, g > 0.5
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def _mean(xs):
    return sum(xs) / len(xs)


def _sample_std(xs):
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _o(xs):
    if not xs:
        return 0.0
    m = _mean(xs)
    return 2 * m / (m * m + 1 + _sample_std(xs) + EPS)


def _q(xs, ys):
    n = len(xs)
    mx, my = _mean(xs), _mean(ys)
    d = max(n - 1, 1)
    vx = sum((x - mx) ** 2 for x in xs) / d
    vy = sum((y - my) ** 2 for y in ys) / d
    cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / d
    num = 4 * mx * my * cxy
    den = (mx * mx + my * my) * (vx + vy)
    # exact ratio: the vanishing cases carry their own conventions, and an
    # absolute epsilon would dominate quadrants holding a few pixels
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


def s_measure(pred, gt, alpha=0.5) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = (np.asarray(gt) > 0.5).astype(np.float64)
    h, w = g.shape
    mu = g.mean()
    if mu == 0:
        return min(max(1 - p.mean(), 0.0), 1.0)
    if mu == 1:
        return min(max(p.mean(), 0.0), 1.0)
    fg = [p[i, j] for i in range(h) for j in range(w) if g[i, j] == 1]
    bg = [1 - p[i, j] for i in range(h) for j in range(w) if g[i, j] == 0]
    s_obj = mu * _o(fg) + (1 - mu) * _o(bg)

    rows = [i for i in range(h) for j in range(w) if g[i, j] == 1]
    cols = [j for i in range(h) for j in range(w) if g[i, j] == 1]
    cy = min(int(math.floor(sum(rows) / len(rows) + 0.5)) + 1, h)
    cx = min(int(math.floor(sum(cols) / len(cols) + 0.5)) + 1, w)
    s_reg = 0.0
    for r0, r1 in ((0, cy), (cy, h)):
        for c0, c1 in ((0, cx), (cx, w)):
            xs = [p[i, j] for i in range(r0, r1) for j in range(c0, c1)]
            ys = [g[i, j] for i in range(r0, r1) for j in range(c0, c1)]
            if xs:
                s_reg += len(xs) / (h * w) * _q(xs, ys)
    return min(max(alpha * s_obj + (1 - alpha) * s_reg, 0.0), 1.0)


def _e_single(b, g):
    mu_g = g.mean()
    if mu_g == 0:
        return 1 - b.mean()
    if mu_g == 1:
        return b.mean()
    pg = g - mu_g
    pb = b - b.mean()
    xi = 2 * pg * pb / (pg * pg + pb * pb + EPS)
    return float(np.sum((xi + 1) ** 2 / 4) / g.size)


def e_measure(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = (np.asarray(gt) > 0.5).astype(np.float64)
    return sum(_e_single((p >= k / 255.0).astype(np.float64), g) for k in range(256)) / 256
