"""Minimal reverse-mode differentiation over numpy arrays.

Graphs are built once from named variables and primitive ops, then evaluated
against bindings (name -> array).  Only the primitives the segmentation
network and its losses need are provided; there is no higher-order
differentiation and no control flow inside a graph.

    x = var("x", (3,))
    f = reduce_sum(sigmoid(x) * x)
    value = evaluate(f, {"x": np.ones(3)})
    grads = gradient(f, {"x": np.ones(3)}, ["x"])
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOSS_EPS = 1e-6

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node: "Expr"):
        super().__init__(f"non-finite value produced by node {node!r}")
        self.node = node


class UnboundVariableError(KeyError):
    pass


@dataclass(eq=False)
class Expr:
    op: str
    inputs: tuple["Expr", ...]
    shape: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    uid: int = field(default_factory=lambda: next(_ids))

    def __hash__(self):
        return self.uid

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Expr#{self.uid} {self.op}{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(_lift(other), -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)


# graph construction ---------------------------------------------------------

def var(name: str, shape: Iterable[int]) -> Expr:
    return Expr("var", (), tuple(int(s) for s in shape), name=name)


def const(value) -> Expr:
    arr = np.asarray(value)
    return Expr("const", (), arr.shape, attrs={"value": arr})


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def _broadcast(a: Expr, b: Expr) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    return Expr("add", (a, b), _broadcast(a, b))


def sub(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    return Expr("sub", (a, b), _broadcast(a, b))


def mul(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    return Expr("mul", (a, b), _broadcast(a, b))


def power(a, exponent: float) -> Expr:
    a = _lift(a)
    return Expr("pow", (a,), a.shape, attrs={"p": float(exponent)})


def log(a) -> Expr:
    a = _lift(a)
    return Expr("log", (a,), a.shape)


def sigmoid(a) -> Expr:
    a = _lift(a)
    return Expr("sigmoid", (a,), a.shape)


def relu(a) -> Expr:
    a = _lift(a)
    return Expr("relu", (a,), a.shape)


def clamp(a, lo: float, hi: float) -> Expr:
    if not lo < hi:
        raise ValueError(f"empty clamp interval [{lo}, {hi}]")
    a = _lift(a)
    return Expr("clamp", (a,), a.shape, attrs={"lo": float(lo), "hi": float(hi)})


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Expr:
    a = _lift(a)
    axes = _norm_axes(axis, len(a.shape))
    return Expr("sum", (a,), _reduced_shape(a.shape, axes, keepdims),
                attrs={"axes": axes, "keepdims": keepdims})


def reduce_mean(a, axis=None, keepdims: bool = False) -> Expr:
    a = _lift(a)
    axes = _norm_axes(axis, len(a.shape))
    return Expr("mean", (a,), _reduced_shape(a.shape, axes, keepdims),
                attrs={"axes": axes, "keepdims": keepdims})


def global_mean_pool(a) -> Expr:
    """(B, C, H, W) -> (B, C, 1, 1)."""
    if len(a.shape) != 4:
        raise ShapeError(f"global_mean_pool expects rank 4, got {a.shape}")
    return Expr("gap", (a,), (a.shape[0], a.shape[1], 1, 1))


def concat(parts: list[Expr]) -> Expr:
    """Concatenate rank-4 tensors along the channel axis."""
    parts = [_lift(p) for p in parts]
    ref = parts[0].shape
    for p in parts:
        if len(p.shape) != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat shape mismatch: {[q.shape for q in parts]}")
    channels = sum(p.shape[1] for p in parts)
    return Expr("concat", tuple(parts), (ref[0], channels, ref[2], ref[3]))


def conv2d(x, w, stride: int = 1) -> Expr:
    """Cross-correlation with zero padding k//2.  x: (B,C,H,W), w: (O,C,k,k)."""
    x, w = _lift(x), _lift(w)
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ShapeError(f"conv2d expects rank-4 operands, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    pad = kh // 2
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    return Expr("conv2d", (x, w), (b, o, ho, wo), attrs={"stride": stride, "pad": pad})


def resize_bilinear(x, size: tuple[int, int]) -> Expr:
    """Bilinear resize of (B,C,H,W) with half-pixel centres and edge clamping."""
    x = _lift(x)
    if len(x.shape) != 4:
        raise ShapeError(f"resize expects rank 4, got {x.shape}")
    ho, wo = int(size[0]), int(size[1])
    return Expr("resize", (x,), (x.shape[0], x.shape[1], ho, wo))


# forward kernels ------------------------------------------------------------

@lru_cache(maxsize=256)
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) linear interpolation matrix, half-pixel aligned."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, Ho, Wo, C, k, k) -> rows of length C*k*k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _conv_forward(x, w, stride, pad, cache):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if k == 1:
        xs = x[:, :, ::stride, ::stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(b * ho * wo, c)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(xp, k, stride, ho, wo)
    cache["cols"] = cols
    out = cols @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))


def _conv_backward(g, x, w, stride, pad, cache, need_x=True):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, o)
    cols = cache["cols"]
    gw = (gmat.T @ cols).reshape(w.shape)
    if not need_x:
        return [None, gw]
    if k == 1:
        gxs = (gmat @ w.reshape(o, c)).reshape(b, ho, wo, c).transpose(0, 3, 1, 2)
        if stride == 1:
            return [np.ascontiguousarray(gxs), gw]
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = gxs
        return [gx, gw]
    gx = np.zeros((b, h + 2 * pad, wd + 2 * pad, c), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            tap = gmat @ np.ascontiguousarray(w[:, :, i, j])
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += tap.reshape(b, ho, wo, c)
    gx = gx.transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return [np.ascontiguousarray(gx), gw]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _forward(node: Expr, vals: list[np.ndarray], aux: dict) -> np.ndarray:
    op = node.op
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "pow":
        p = node.attrs["p"]
        if p == 2.0:
            return vals[0] * vals[0]
        if p == -1.0:
            return 1.0 / vals[0]
        return vals[0] ** p
    if op == "log":
        return np.log(vals[0])
    if op == "sigmoid":
        return _sigmoid(vals[0])
    if op == "relu":
        return np.maximum(vals[0], 0)
    if op == "clamp":
        return np.clip(vals[0], node.attrs["lo"], node.attrs["hi"])
    if op == "sum":
        return np.sum(vals[0], axis=node.attrs["axes"], keepdims=node.attrs["keepdims"])
    if op == "mean":
        return np.mean(vals[0], axis=node.attrs["axes"], keepdims=node.attrs["keepdims"])
    if op == "gap":
        return vals[0].mean(axis=(2, 3), keepdims=True)
    if op == "concat":
        return np.concatenate(vals, axis=1)
    if op == "conv2d":
        return _conv_forward(vals[0], vals[1], node.attrs["stride"], node.attrs["pad"], aux)
    if op == "resize":
        x = vals[0]
        ah = interp_matrix(node.shape[2], x.shape[2]).astype(x.dtype)
        aw = interp_matrix(node.shape[3], x.shape[3]).astype(x.dtype)
        return np.matmul(np.matmul(ah, x), aw.T)
    raise NotImplementedError(op)


def _backward(node: Expr, g: np.ndarray, vals: list[np.ndarray], out: np.ndarray,
              aux: dict, need: list[bool]) -> list[np.ndarray | None]:
    op = node.op
    shapes = [inp.shape for inp in node.inputs]
    if op == "add":
        return [_unbroadcast(g, shapes[0]), _unbroadcast(g, shapes[1])]
    if op == "sub":
        return [_unbroadcast(g, shapes[0]), _unbroadcast(-g, shapes[1])]
    if op == "mul":
        return [_unbroadcast(g * vals[1], shapes[0]) if need[0] else None,
                _unbroadcast(g * vals[0], shapes[1]) if need[1] else None]
    if op == "pow":
        p = node.attrs["p"]
        if p == 2.0:
            return [2.0 * g * vals[0]]
        if p == -1.0:
            return [-g * out * out]
        return [g * p * vals[0] ** (p - 1.0)]
    if op == "log":
        return [g / vals[0]]
    if op == "sigmoid":
        return [g * out * (1.0 - out)]
    if op == "relu":
        return [g * (vals[0] > 0)]
    if op == "clamp":
        lo, hi = node.attrs["lo"], node.attrs["hi"]
        return [g * ((vals[0] >= lo) & (vals[0] <= hi))]
    if op in ("sum", "mean"):
        axes = node.attrs["axes"]
        if not node.attrs["keepdims"]:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, shapes[0])
        if op == "mean":
            g = g / int(np.prod([shapes[0][a] for a in axes]))
        return [g]
    if op == "gap":
        hw = shapes[0][2] * shapes[0][3]
        return [np.broadcast_to(g / hw, shapes[0])]
    if op == "concat":
        grads, start = [], 0
        for s in shapes:
            grads.append(g[:, start:start + s[1]])
            start += s[1]
        return grads
    if op == "conv2d":
        return _conv_backward(g, vals[0], vals[1], node.attrs["stride"], node.attrs["pad"], aux,
                              need_x=need[0])
    if op == "resize":
        x = vals[0]
        ah = interp_matrix(node.shape[2], x.shape[2]).astype(g.dtype)
        aw = interp_matrix(node.shape[3], x.shape[3]).astype(g.dtype)
        return [np.matmul(np.matmul(ah.T, g), aw)]
    raise NotImplementedError(op)


# evaluation -----------------------------------------------------------------

def topo_order(roots: Iterable[Expr]) -> list[Expr]:
    order, seen = [], set()
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if inp.uid not in seen:
                    stack.append((inp, False))
    return order


def free_variables(expr: Expr) -> dict[str, tuple[int, ...]]:
    return {n.name: n.shape for n in topo_order([expr]) if n.op == "var"}


class Cache:
    """Forward values (and conv scratch) shared between evaluate/gradient calls."""

    def __init__(self):
        self.values: dict[int, np.ndarray] = {}
        self.aux: dict[int, dict] = {}


def _run(roots: list[Expr], bindings: Mapping[str, Any], cache: Cache, check_finite: bool):
    for node in topo_order(roots):
        if node.uid in cache.values:
            continue
        if node.op == "var":
            if node.name not in bindings:
                raise UnboundVariableError(node.name)
            v = np.asarray(bindings[node.name])
            if v.shape != node.shape:
                raise ShapeError(f"binding {node.name!r} has shape {v.shape}, expected {node.shape}")
        elif node.op == "const":
            v = node.attrs["value"]
        else:
            aux = cache.aux.setdefault(node.uid, {})
            v = _forward(node, [cache.values[i.uid] for i in node.inputs], aux)
            if v.shape != node.shape:
                raise ShapeError(f"{node!r} produced shape {v.shape}")
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(node)
        cache.values[node.uid] = v


def evaluate(expr: Expr | list[Expr], bindings: Mapping[str, Any], cache: Cache | None = None,
             check_finite: bool = True):
    """Forward value(s) of ``expr`` under ``bindings``.

    Passing the same ``cache`` to a later ``gradient`` call reuses the forward pass.
    """
    cache = cache if cache is not None else Cache()
    roots = expr if isinstance(expr, list) else [expr]
    _run(roots, bindings, cache, check_finite)
    if isinstance(expr, list):
        return [cache.values[e.uid] for e in expr]
    return cache.values[expr.uid]


def gradient(expr: Expr, bindings: Mapping[str, Any], wrt: Iterable[str],
             cache: Cache | None = None, check_finite: bool = True) -> dict[str, np.ndarray]:
    """d expr / d v for every variable name in ``wrt``; ``expr`` must be scalar."""
    if int(np.prod(expr.shape)) != 1:
        raise ShapeError(f"gradient needs a scalar root, got shape {expr.shape}")
    wrt = list(wrt)
    for name in wrt:
        if name not in bindings:
            raise UnboundVariableError(name)
    cache = cache if cache is not None else Cache()
    _run([expr], bindings, cache, check_finite)

    order = topo_order([expr])
    needed = set()
    wanted = set(wrt)
    for node in order:
        if (node.op == "var" and node.name in wanted) or any(i.uid in needed for i in node.inputs):
            needed.add(node.uid)

    root_val = cache.values[expr.uid]
    grads: dict[int, np.ndarray] = {expr.uid: np.ones_like(root_val)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(node.uid, None)
        if g is None or node.uid not in needed:
            continue
        if node.op == "var":
            prev = out.get(node.name)
            out[node.name] = g if prev is None else prev + g
            continue
        if node.op == "const":
            continue
        vals = [cache.values[i.uid] for i in node.inputs]
        need = [inp.uid in needed for inp in node.inputs]
        in_grads = _backward(node, g, vals, cache.values[node.uid], cache.aux.get(node.uid, {}), need)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or inp.uid not in needed:
                continue
            if inp.uid in grads:
                grads[inp.uid] = grads[inp.uid] + ig
            else:
                grads[inp.uid] = ig
    for name in wrt:
        if name not in out:
            out[name] = np.zeros_like(np.asarray(bindings[name]), dtype=root_val.dtype)
        else:
            out[name] = np.asarray(out[name]).reshape(np.shape(bindings[name]))
        if check_finite and not np.all(np.isfinite(out[name])):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    return out


def numeric_gradient(f: Callable[[dict], float], bindings: Mapping[str, np.ndarray], name: str,
                     direction: np.ndarray, h: float = 1e-5) -> float:
    """Central finite difference of ``f`` along ``direction`` in variable ``name``."""
    plus = dict(bindings)
    minus = dict(bindings)
    plus[name] = bindings[name] + h * direction
    minus[name] = bindings[name] - h * direction
    return (f(plus) - f(minus)) / (2.0 * h)
