"""Mini-batch training of the multi-mask network with the winner-take-all objective."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import netmodel as nm
from . import objective as obj

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: obj.LossConfig = field(default_factory=lambda: obj.LossConfig(normalize_focal=True))
    dtype: str = "float32"
    epoch_offset: int = 0
    mask_only: bool = False  # labeler training: mask loss on every head, no score term

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = obj.LossConfig(**self.loss)
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size > 0 and lr > 0 required")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            g = g.astype(params[k].dtype, copy=False)
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * g * g
            params[k] -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(params[k].dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class TrainState:
    params: dict
    bn_state: dict
    optimizer: Adam | None = None
    epochs_done: int = 0
    losses: list[float] = field(default_factory=list)


_LOSS_GRAPHS: dict = {}


def _loss_graph(mcfg: nm.ModelConfig, batch: int, lcfg: obj.LossConfig, mask_only: bool = False):
    key = (json.dumps(mcfg.to_dict(), sort_keys=True), batch, json.dumps(lcfg.to_dict(), sort_keys=True),
           mask_only)
    if key not in _LOSS_GRAPHS:
        if len(_LOSS_GRAPHS) > 32:
            _LOSS_GRAPHS.clear()
        g = nm.get_graph(mcfg, batch, training=True)
        y = dc.var("target", (batch, 1, mcfg.height, mcfg.width))
        coef = dc.var("coef", (batch, mcfg.heads))
        if mask_only:
            loss = dc.reduce_mean(dc.reduce_sum(obj.mask_loss_expr(g.masks, y, lcfg), axis=1))
        else:
            st = dc.var("score_target", (batch, mcfg.heads)) if lcfg.score_target == "binary" else None
            loss = obj.batch_objective_expr(g.masks, g.scores, y, coef, lcfg, st)
        _LOSS_GRAPHS[key] = (g, loss)
    return _LOSS_GRAPHS[key]


def _binary_iou(masks, y):
    b = masks >= 0.5
    yb = y[:, None] > 0.5
    inter = (b & yb).sum(axis=(2, 3))
    union = (b | yb).sum(axis=(2, 3))
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def train_step(state: TrainState, mcfg: nm.ModelConfig, batch_input, targets: np.ndarray,
               epoch: int, cfg: TrainConfig) -> float:
    """One optimiser step on a batch; returns the batch objective."""
    lcfg = cfg.loss
    batch = len(targets)
    graph, loss = _loss_graph(mcfg, batch, lcfg, cfg.mask_only)
    dtype = np.dtype(cfg.dtype)
    bindings = dict(state.params)
    bindings.update(nm.input_bindings(mcfg, batch_input))
    y = targets.astype(dtype)
    bindings["target"] = y[:, None]
    cache = dc.Cache()
    masks, scores = dc.evaluate([graph.masks, graph.scores], bindings, cache=cache)
    winners = obj.select_winner(masks, y, scores, lcfg.winner_rule)
    bindings["coef"] = obj.branch_coefficients(winners, mcfg.heads, epoch, lcfg, dtype)
    if lcfg.score_target == "binary":
        bindings["score_target"] = _binary_iou(masks, y).astype(dtype)
    grads = dc.gradient(loss, bindings, list(state.params), cache=cache)
    value = float(cache.values[loss.uid])
    m = nm.BN_MOMENTUM
    for prefix, (mu, var) in graph.bn_stats.items():
        for key, node in ((f"{prefix}.mean", mu), (f"{prefix}.var", var)):
            state.bn_state[key] = ((1 - m) * state.bn_state[key] + m * cache.values[node.uid]).astype(dtype)
    state.optimizer.step(state.params, grads)
    return value


def _take(inputs, idx):
    return inputs.take(idx) if isinstance(inputs, nm.ModalityBundle) else inputs[idx]


def train(params: dict, inputs, targets: np.ndarray, mcfg: nm.ModelConfig, cfg: TrainConfig,
          bn_state: dict | None = None, state: TrainState | None = None,
          on_epoch=None) -> TrainState:
    """Minimise the objective; ``t`` in the decay term is the global epoch index.

    Passing a previous ``state`` continues training (optimizer moments and
    epoch counter carry over).  Returns the state with a per-epoch mean loss
    curve appended.
    """
    n = len(targets)
    if n == 0:
        raise ValueError("empty dataset")
    dtype = np.dtype(cfg.dtype)
    if state is None:
        params = {k: v.astype(dtype).copy() for k, v in params.items()}
        bn = {k: v.astype(dtype).copy() for k, v in (bn_state or nm.init_bn_state(mcfg, dtype)).items()}
        state = TrainState(params, bn, Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps))
    if isinstance(inputs, nm.ModalityBundle):
        inputs = inputs.astype(dtype)
    else:
        inputs = np.asarray(inputs, dtype=dtype)
    targets = np.asarray(targets, dtype=dtype)
    for _ in range(cfg.epochs):
        epoch = state.epochs_done + cfg.epoch_offset
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            try:
                value = train_step(state, mcfg, _take(inputs, idx), targets[idx], epoch, cfg)
            except dc.NonFiniteError as exc:
                raise FloatingPointError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            total += value * len(idx)
            count += len(idx)
        state.losses.append(total / count)
        state.epochs_done += 1
        log.info("epoch %d loss %.4f", epoch, state.losses[-1])
        if on_epoch is not None:
            on_epoch(state)
    return state
