"""Finite-difference checks of every diffcore primitive, every loss and the full model.

Each case draws a random graph instance in float64, reduces it to a scalar
with fixed random weights, and compares the analytic directional derivative
with a central difference along a random direction.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import netmodel as nm
from . import objective as obj

H = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _away_from(rng, shape, kinks=(0.0,), margin=0.05, scale=1.0):
    x = rng.normal(0, scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.sign(x[close] - k + 1e-12) * (margin + rng.random(close.sum()))
    return x


def _shape(rng, rank=None):
    rank = rank or int(rng.integers(1, 5))
    return tuple(int(v) for v in rng.integers(1, 5, size=rank))


def directional_check(root: dc.Expr, bindings: dict, names=None, rng=None, h: float = H) -> float:
    """Worst relative error over the named variables of one scalar graph."""
    rng = rng or np.random.default_rng(0)
    names = list(names or bindings)
    grads = dc.gradient(root, bindings, names)
    worst = 0.0

    def f(b):
        return float(dc.evaluate(root, b))

    for name in names:
        d = rng.normal(size=np.shape(bindings[name]))
        d /= np.linalg.norm(d) + 1e-300
        analytic = float(np.sum(grads.get(name, 0.0) * d))
        numeric = dc.numeric_gradient(f, bindings, name, d, h)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def _scalarize(expr: dc.Expr, rng) -> dc.Expr:
    weights = rng.normal(size=expr.shape)
    return dc.reduce_sum(expr * dc.const(weights))


# primitive cases: rng -> (expr, bindings) ---------------------------------------------

def _binary(op, broadcast=True):
    def build(rng):
        sa = _shape(rng)
        sb = tuple(1 if (broadcast and rng.random() < 0.3) else s for s in sa)
        a, b = dc.var("a", sa), dc.var("b", sb)
        return op(a, b), {"a": rng.normal(size=sa), "b": rng.normal(size=sb)}
    return build


def _power(rng):
    s = _shape(rng)
    p = float(rng.choice([-1.0, -0.5, 0.5, 2.0, 3.0, 1.7]))
    x = dc.var("x", s)
    return dc.power(x, p), {"x": rng.uniform(0.3, 2.0, size=s)}


def _unary(op, sample):
    def build(rng):
        s = _shape(rng)
        x = dc.var("x", s)
        return op(x), {"x": sample(rng, s)}
    return build


def _clamp(rng):
    s = _shape(rng)
    lo, hi = sorted(rng.uniform(-1, 1, size=2))
    if hi - lo < 0.3:
        hi = lo + 0.3
    x = dc.var("x", s)
    return dc.clamp(x, lo, hi), {"x": _away_from(rng, s, (lo, hi), 0.02)}


def _reduce(op):
    def build(rng):
        s = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
        keep = bool(rng.random() < 0.5)
        x = dc.var("x", s)
        return op(x, axis=axis, keepdims=keep), {"x": rng.normal(size=s)}
    return build


def _gap(rng):
    s = _shape(rng, 4)
    x = dc.var("x", s)
    return dc.global_mean_pool(x), {"x": rng.normal(size=s)}


def _concat(rng):
    b, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    parts = [dc.var(f"x{i}", (b, int(rng.integers(1, 4)), h, w)) for i in range(int(rng.integers(2, 4)))]
    return dc.concat(parts), {p.name: rng.normal(size=p.shape) for p in parts}


def _conv(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 7, size=2))
    x, wt = dc.var("x", (b, cin, h, w)), dc.var("w", (cout, cin, k, k))
    return dc.conv2d(x, wt, stride), {"x": rng.normal(size=x.shape), "w": rng.normal(size=wt.shape)}


def _resize(rng):
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(1, 7, size=2))
    oh, ow = (int(v) for v in rng.integers(1, 9, size=2))
    x = dc.var("x", (b, c, h, w))
    return dc.resize_bilinear(x, (oh, ow)), {"x": rng.normal(size=x.shape)}


PRIMITIVES = {
    "add": _binary(dc.add),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "power": _power,
    "log": _unary(dc.log, lambda rng, s: rng.uniform(0.1, 3.0, size=s)),
    "sigmoid": _unary(dc.sigmoid, lambda rng, s: rng.normal(0, 2, size=s)),
    "relu": _unary(dc.relu, lambda rng, s: _away_from(rng, s)),
    "clamp": _clamp,
    "reduce_sum": _reduce(dc.reduce_sum),
    "reduce_mean": _reduce(dc.reduce_mean),
    "global_mean_pool": _gap,
    "concat": _concat,
    "conv2d": _conv,
    "resize_bilinear": _resize,
}


# loss cases --------------------------------------------------------------------------

def _mask_pair(rng, batch=False):
    n = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 7, size=2))
    shape = (int(rng.integers(1, 3)), n, h, w) if batch else (n, h, w)
    m = rng.uniform(0.05, 0.95, size=shape)
    y = (rng.random(size=(shape[0], 1, h, w) if batch else (1, h, w)) < 0.5).astype(np.float64)
    return m, y


def _loss_case(builder):
    def build(rng):
        m, y = _mask_pair(rng)
        cfg = obj.LossConfig(focal_variant=str(rng.choice(obj.FOCAL_VARIANTS)),
                             normalize_focal=bool(rng.random() < 0.5))
        mv = dc.var("m", m.shape)
        return builder(mv, dc.const(y), cfg), {"m": m}
    return build


def _score_case(rng):
    m, y = _mask_pair(rng)
    s = rng.uniform(0, 1, size=m.shape[0])
    mv, sv = dc.var("m", m.shape), dc.var("s", s.shape)
    return obj.score_loss_expr(sv, mv, dc.const(y)), {"m": m, "s": s}


def _objective_case(rng):
    m, y = _mask_pair(rng, batch=True)
    b, n = m.shape[:2]
    s = rng.uniform(0, 1, size=(b, n))
    cfg = obj.LossConfig(focal_variant=str(rng.choice(obj.FOCAL_VARIANTS)))
    winners = obj.select_winner(m, y[:, 0])
    coef = obj.branch_coefficients(winners, n, int(rng.integers(0, 10)), cfg)
    mv, sv = dc.var("m", m.shape), dc.var("s", s.shape)
    return obj.batch_objective_expr(mv, sv, dc.const(y), dc.const(coef), cfg), {"m": m, "s": s}


LOSSES = {
    "soft_iou": _loss_case(lambda m, y, cfg: obj.soft_iou_expr(m, y)),
    "focal_loss": _loss_case(obj.focal_expr),
    "iou_loss": _loss_case(lambda m, y, cfg: 1.0 - obj.soft_iou_expr(m, y)),
    "mask_loss": _loss_case(obj.mask_loss_expr),
    "score_loss": _score_case,
    "total_objective": _objective_case,
}


def check_case(name: str, build, instances: int = 50, seed: int = 0, tolerance: float = 1e-5) -> CheckResult:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        expr, bindings = build(rng)
        root = _scalarize(expr, rng) if int(np.prod(expr.shape)) != 1 else dc.reduce_sum(expr)
        worst = max(worst, directional_check(root, bindings, rng=rng))
    return CheckResult(name, instances, worst, tolerance)


def check_primitives(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    return [check_case(n, b, instances, seed) for n, b in PRIMITIVES.items()]


def check_losses(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    return [check_case(n, b, instances, seed) for n, b in LOSSES.items()]


def model_check_config(modality_input: bool = False) -> nm.ModelConfig:
    return nm.ModelConfig(height=16, width=16, widths=(4, 6), fusion_width=4, heads=3,
                          modality_input=modality_input, modality_width=3, seed=3)


def check_model(cfg: nm.ModelConfig | None = None, batch: int = 2, seed: int = 0,
                tolerance: float = 1e-4) -> CheckResult:
    """Objective through the whole network, one random direction per parameter tensor."""
    cfg = cfg or model_check_config()
    rng = np.random.default_rng(seed)
    graph = nm.build_graph(cfg, batch, training=True)
    params = nm.init_params(cfg, np.float64)
    # perturb every tensor so zero-initialised ones carry gradient paths too
    params = {k: v + rng.normal(0, 0.1, size=v.shape) for k, v in params.items()}
    h, w = cfg.height, cfg.width
    y = (rng.random((batch, 1, h, w)) < 0.4).astype(np.float64)
    bindings = dict(params)
    if cfg.modality_input:
        bundle = nm.ModalityBundle(rng.random((batch, cfg.semantic_channels, h, w)),
                                   rng.random((batch, cfg.generative_channels, h // 4, w // 4)),
                                   rng.random((batch, cfg.concept_channels, h, w)))
        bindings.update(nm.input_bindings(cfg, bundle))
    else:
        bindings["in.image"] = rng.random((batch, cfg.in_channels, h, w))
    lcfg = obj.LossConfig()
    masks = dc.evaluate(graph.masks, bindings)
    coef = obj.branch_coefficients(obj.select_winner(masks, y[:, 0]), cfg.heads, 1, lcfg)
    loss = obj.batch_objective_expr(graph.masks, graph.scores, dc.const(y), dc.const(coef), lcfg)
    worst = directional_check(loss, bindings, list(params), rng=rng)
    return CheckResult("model" + ("_fusion" if cfg.modality_input else ""), len(params), worst, tolerance)


def run_all(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    results = check_primitives(instances, seed) + check_losses(instances, seed)
    results.append(check_model(model_check_config(False), seed=seed))
    results.append(check_model(dataclasses.replace(model_check_config(True)), seed=seed))
    return results
