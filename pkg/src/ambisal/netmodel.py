"""Multi-mask segmentation network and the multi-modal fusion block.

A small DPT-flavoured convolutional network: a strided encoder, 1x1
reassembly of every stage to a common fusion width, top-down fusion with
residual conv units and bilinear upsampling, then two heads: N soft masks at
input resolution and N predicted IoU scores from the deepest fused map.

The same network doubles as the dataset labeler when the input is a
``ModalityBundle``: the three proxy modalities are first merged by
:func:`fuse_modalities`, and the fused map is fed to the encoder.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

CHECKPOINT_VERSION = 1
MODALITIES = ("semantic", "generative", "concept")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MASK_CLAMP = 1e-6


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    fusion_width: int = 32
    heads: int = 3
    seed: int = 0
    # labeler role: input is a ModalityBundle instead of an image
    modality_input: bool = False
    semantic_channels: int = 4
    generative_channels: int = 2
    concept_channels: int = 2
    modality_width: int = 16
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.modalities = tuple(self.modalities)
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.widths)

    def validate(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if not self.widths or min(self.widths) <= 0 or self.fusion_width <= 0:
            raise ValueError("all widths must be positive")
        step = 2 ** (self.stages - 1)
        if self.height % step or self.width % step:
            raise ValueError(f"input {self.height}x{self.width} not divisible by {step}")
        if self.modality_input:
            if not self.modalities or set(self.modalities) - set(MODALITIES):
                raise ValueError(f"modalities must be a non-empty subset of {MODALITIES}")
            if self.height % 4 or self.width % 4:
                raise ValueError("labeler input needs height and width divisible by 4")

    @property
    def encoder_in(self) -> int:
        return self.modality_width if self.modality_input else self.in_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModalityBundle:
    """Aligned proxy modalities for one batch.

    semantic: (B, C_a, H, W); generative: (B, C_b, H/4, W/4); concept: (B, 2, H, W).
    """
    semantic: np.ndarray
    generative: np.ndarray
    concept: np.ndarray

    def __post_init__(self):
        for name in MODALITIES:
            arr = getattr(self, name)
            if arr.ndim == 3:
                setattr(self, name, arr[None])
        b = self.semantic.shape[0]
        if self.generative.shape[0] != b or self.concept.shape[0] != b:
            raise ValueError("modalities disagree on batch size")
        if self.concept.shape[2:] != self.semantic.shape[2:]:
            raise ValueError("concept maps must share the semantic resolution")

    def __len__(self):
        return self.semantic.shape[0]

    def take(self, idx) -> "ModalityBundle":
        return ModalityBundle(self.semantic[idx], self.generative[idx], self.concept[idx])

    def astype(self, dtype) -> "ModalityBundle":
        return ModalityBundle(*(getattr(self, m).astype(dtype) for m in MODALITIES))

    @staticmethod
    def stack(bundles: list["ModalityBundle"]) -> "ModalityBundle":
        return ModalityBundle(*(np.concatenate([getattr(b, m) for b in bundles]) for m in MODALITIES))


@dataclass
class MultiMaskOutput:
    masks: np.ndarray   # (B, N, H, W) in (0, 1)
    scores: np.ndarray  # (B, N) in (0, 1)

    def selected(self) -> np.ndarray:
        """Per-sample branch index with the highest predicted score."""
        return np.argmax(self.scores, axis=1)

    def selected_masks(self) -> np.ndarray:
        idx = self.selected()
        return self.masks[np.arange(len(idx)), idx]


# parameters -----------------------------------------------------------------

def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    f = cfg.fusion_width
    if cfg.modality_input:
        mw = cfg.modality_width
        chans = {"semantic": cfg.semantic_channels, "generative": cfg.generative_channels,
                 "concept": cfg.concept_channels}
        for m in cfg.modalities:
            shapes[f"fuse.{m}.w"] = (mw, chans[m], 3, 3)
            shapes[f"fuse.{m}.gamma"] = (1, mw, 1, 1)
            shapes[f"fuse.{m}.beta"] = (1, mw, 1, 1)
        k = len(cfg.modalities)
        shapes["fuse.mix.w"] = (mw, k * mw, 3, 3)
        shapes["fuse.mix.b"] = (1, mw, 1, 1)
        shapes["fuse.out.w"] = (mw, mw, 1, 1)
        shapes["fuse.out.b"] = (1, mw, 1, 1)
    c_in = cfg.encoder_in
    for s, c in enumerate(cfg.widths):
        shapes[f"enc{s}.w"] = (c, c_in, 3, 3)
        shapes[f"enc{s}.b"] = (1, c, 1, 1)
        shapes[f"reas{s}.w"] = (f, c, 1, 1)
        shapes[f"reas{s}.b"] = (1, f, 1, 1)
        c_in = c
    for s in range(1, cfg.stages):
        shapes[f"rcu{s}.w"] = (f, f, 3, 3)
        shapes[f"rcu{s}.b"] = (1, f, 1, 1)
    shapes["mask.w"] = (cfg.heads, f, 1, 1)
    shapes["mask.b"] = (1, cfg.heads, 1, 1)
    shapes["score1.w"] = (f, f, 1, 1)
    shapes["score1.b"] = (1, f, 1, 1)
    shapes["score2.w"] = (cfg.heads, f, 1, 1)
    shapes["score2.b"] = (1, cfg.heads, 1, 1)
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded initialisation; identical seeds give bit-identical parameters."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            v = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".beta") or name.startswith("fuse.out."):
            # fusion output starts at zero so the block is a residual identity
            v = np.zeros(shape)
        elif name.startswith("rcu"):
            v = _he(rng, shape) * 0.5
        elif name.startswith("mask.w") or name.startswith("score2.w"):
            v = rng.normal(0.0, 0.01, size=shape)
        else:
            v = _he(rng, shape)
        params[name] = v.astype(dtype)
    # break head symmetry a little so branches can diverge
    params["mask.b"][:] = np.linspace(-0.2, 0.2, cfg.heads).reshape(1, -1, 1, 1) if cfg.heads > 1 else 0.0
    return params


def init_bn_state(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    state = {}
    if cfg.modality_input:
        for m in cfg.modalities:
            state[f"fuse.{m}.mean"] = np.zeros((1, cfg.modality_width, 1, 1), dtype=dtype)
            state[f"fuse.{m}.var"] = np.ones((1, cfg.modality_width, 1, 1), dtype=dtype)
    return state


# graph construction ----------------------------------------------------------

@dataclass
class Graph:
    """Symbolic forward graph for one (config, batch size, mode)."""
    cfg: ModelConfig
    batch: int
    training: bool
    masks: dc.Expr
    scores: dc.Expr
    features: dc.Expr | None
    bn_stats: dict[str, tuple[dc.Expr, dc.Expr]] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()

    @property
    def param_names(self) -> list[str]:
        return list(param_shapes(self.cfg))


def _pvars(cfg: ModelConfig) -> dict[str, dc.Expr]:
    return {name: dc.var(name, shape) for name, shape in param_shapes(cfg).items()}


def _batchnorm(x: dc.Expr, p, prefix: str, training: bool, stats: dict):
    gamma, beta = p[f"{prefix}.gamma"], p[f"{prefix}.beta"]
    if training:
        mu = dc.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        centred = x - mu
        var = dc.reduce_mean(centred * centred, axis=(0, 2, 3), keepdims=True)
        stats[prefix] = (mu, var)
    else:
        mu = dc.var(f"{prefix}.mean", (1, x.shape[1], 1, 1))
        var = dc.var(f"{prefix}.var", (1, x.shape[1], 1, 1))
        centred = x - mu
    return centred * dc.power(var + BN_EPS, -0.5) * gamma + beta


def build_fusion(cfg: ModelConfig, p, batch: int, training: bool, stats: dict) -> dc.Expr:
    h, w = cfg.height, cfg.width
    shapes = {
        "semantic": (batch, cfg.semantic_channels, h, w),
        "generative": (batch, cfg.generative_channels, h // 4, w // 4),
        "concept": (batch, cfg.concept_channels, h, w),
    }
    projected = []
    for m in cfg.modalities:
        x = dc.var(f"in.{m}", shapes[m])
        y = dc.conv2d(x, p[f"fuse.{m}.w"])
        y = dc.relu(_batchnorm(y, p, f"fuse.{m}", training, stats))
        if y.shape[2:] != (h, w):
            y = dc.resize_bilinear(y, (h, w))
        projected.append(y)
    mixed = dc.concat(projected) if len(projected) > 1 else projected[0]
    mixed = dc.relu(dc.conv2d(mixed, p["fuse.mix.w"]) + p["fuse.mix.b"])
    mixed = dc.conv2d(mixed, p["fuse.out.w"]) + p["fuse.out.b"]
    # residual base is the semantic projection when present
    return projected[0] + mixed


def build_graph(cfg: ModelConfig, batch: int, training: bool = True) -> Graph:
    p = _pvars(cfg)
    stats: dict = {}
    if cfg.modality_input:
        x = build_fusion(cfg, p, batch, training, stats)
        fused_in = x
        inputs = tuple(f"in.{m}" for m in cfg.modalities)
    else:
        x = dc.var("in.image", (batch, cfg.in_channels, cfg.height, cfg.width))
        fused_in = None
        inputs = ("in.image",)

    feats = []
    for s in range(cfg.stages):
        x = dc.relu(dc.conv2d(x, p[f"enc{s}.w"], stride=1 if s == 0 else 2) + p[f"enc{s}.b"])
        feats.append(dc.conv2d(x, p[f"reas{s}.w"]) + p[f"reas{s}.b"])

    last = cfg.stages - 1
    path = feats[last]
    if last > 0:
        path = path + dc.conv2d(dc.relu(path), p[f"rcu{last}.w"]) + p[f"rcu{last}.b"]
    deepest = path
    for s in range(last - 1, -1, -1):
        path = dc.resize_bilinear(path, feats[s].shape[2:]) + feats[s]
        if s > 0:
            path = path + dc.conv2d(dc.relu(path), p[f"rcu{s}.w"]) + p[f"rcu{s}.b"]

    logits = dc.conv2d(dc.relu(path), p["mask.w"]) + p["mask.b"]
    masks = dc.clamp(dc.sigmoid(logits), MASK_CLAMP, 1.0 - MASK_CLAMP)

    pooled = dc.global_mean_pool(deepest)
    hidden = dc.relu(dc.conv2d(pooled, p["score1.w"]) + p["score1.b"])
    scores = dc.sigmoid(dc.conv2d(hidden, p["score2.w"]) + p["score2.b"])
    scores = dc.reduce_sum(scores, axis=(2, 3))
    return Graph(cfg, batch, training, masks, scores, fused_in, stats, inputs)


_GRAPHS: dict = {}


def get_graph(cfg: ModelConfig, batch: int, training: bool) -> Graph:
    key = (json.dumps(cfg.to_dict(), sort_keys=True), batch, training)
    if key not in _GRAPHS:
        if len(_GRAPHS) > 64:
            _GRAPHS.clear()
        _GRAPHS[key] = build_graph(cfg, batch, training)
    return _GRAPHS[key]


def input_bindings(cfg: ModelConfig, batch_input) -> dict[str, np.ndarray]:
    if cfg.modality_input:
        if not isinstance(batch_input, ModalityBundle):
            raise TypeError("labeler config expects a ModalityBundle")
        return {f"in.{m}": getattr(batch_input, m) for m in cfg.modalities}
    arr = np.asarray(batch_input)
    if arr.ndim == 3:
        arr = arr[None]
    return {"in.image": arr}


def _batch_size(cfg, batch_input) -> int:
    if cfg.modality_input:
        return len(batch_input)
    arr = np.asarray(batch_input)
    return 1 if arr.ndim == 3 else arr.shape[0]


def forward(params: dict, batch_input, cfg: ModelConfig, bn_state: dict | None = None,
            training: bool = False, cache: dc.Cache | None = None) -> MultiMaskOutput:
    """Run the network.  ``batch_input`` is (B,C,H,W) images or a ModalityBundle."""
    graph = get_graph(cfg, _batch_size(cfg, batch_input), training)
    bindings = dict(params)
    bindings.update(input_bindings(cfg, batch_input))
    if not training:
        bindings.update(bn_state if bn_state is not None else init_bn_state(cfg))
    masks, scores = dc.evaluate([graph.masks, graph.scores], bindings, cache=cache)
    return MultiMaskOutput(masks, scores)


def fuse_modalities(params: dict, bundle: ModalityBundle, cfg: ModelConfig,
                    bn_state: dict | None = None, training: bool = False) -> np.ndarray:
    """Fused (B, modality_width, H, W) features of a bundle."""
    if not cfg.modality_input:
        raise ValueError("config has no modality input")
    for m, c in (("semantic", cfg.semantic_channels), ("generative", cfg.generative_channels),
                 ("concept", cfg.concept_channels)):
        if m in cfg.modalities and getattr(bundle, m).shape[1] != c:
            raise ValueError(f"{m} has {getattr(bundle, m).shape[1]} channels, config says {c}")
    graph = get_graph(cfg, len(bundle), training)
    bindings = dict(params)
    bindings.update(input_bindings(cfg, bundle))
    if not training:
        bindings.update(bn_state if bn_state is not None else init_bn_state(cfg))
    return dc.evaluate(graph.features, bindings)


def predict(params: dict, inputs, cfg: ModelConfig, bn_state: dict | None = None,
            batch_size: int = 64) -> MultiMaskOutput:
    """Eval-mode forward over an arbitrarily long input, in chunks."""
    n = len(inputs)
    masks, scores = [], []
    for start in range(0, n, batch_size):
        idx = slice(start, min(start + batch_size, n))
        chunk = inputs.take(idx) if isinstance(inputs, ModalityBundle) else inputs[idx]
        out = forward(params, chunk, cfg, bn_state, training=False)
        masks.append(out.masks)
        scores.append(out.scores)
    return MultiMaskOutput(np.concatenate(masks), np.concatenate(scores))


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: ModelConfig, bn_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """npz container: named tensors plus a JSON header with config and format version."""
    header = {"format_version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays.update({f"bn/{k}": v for k, v in (bn_state or {}).items()})
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        params = {k[6:]: data[k].copy() for k in data.files if k.startswith("param/")}
        bn_state = {k[3:]: data[k].copy() for k in data.files if k.startswith("bn/")}
    cfg = ModelConfig.from_dict(header["config"])
    return params, cfg, bn_state, header.get("extra", {})
