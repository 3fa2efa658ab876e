"""Quality filtering of generated samples: consistency, cohesion, coverage, presence.

A *predictor* is any callable mapping images (B,3,H,W) to soft masks
(B,H,W).  :class:`ModelPredictor` wraps a trained multi-mask network and
returns its score-selected branch; tests use hand-written stubs.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import netmodel as nm
from .diffcore import interp_matrix

log = logging.getLogger(__name__)

STAGES = ("consistency", "components", "coverage", "presence")
DEFAULT_TRANSFORMS = ("hflip", "vflip", "rescale:0.75")
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


# transforms ------------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    """Image transform with a matching inverse on predicted masks."""
    name: str

    def apply(self, images: np.ndarray) -> np.ndarray:
        if self.name == "identity":
            return images
        if self.name == "hflip":
            return images[..., ::-1].copy()
        if self.name == "vflip":
            return images[..., ::-1, :].copy()
        h, w = images.shape[-2:]
        f = self.factor
        dh, dw = max(1, int(round(h * f))), max(1, int(round(w * f)))
        down_h, down_w = interp_matrix(dh, h), interp_matrix(dw, w)
        up_h, up_w = interp_matrix(h, dh), interp_matrix(w, dw)
        small = np.einsum("ih,...hw,jw->...ij", down_h, images, down_w)
        out = np.einsum("ih,...hw,jw->...ij", up_h, small, up_w)
        return out.astype(images.dtype)

    def invert_mask(self, masks: np.ndarray) -> np.ndarray:
        if self.name == "hflip":
            return masks[..., ::-1]
        if self.name == "vflip":
            return masks[..., ::-1, :]
        # identity and down-up rescale predict in the original frame already
        return masks

    @property
    def factor(self) -> float:
        return float(self.name.split(":", 1)[1])


def parse_transforms(names) -> list[Transform]:
    out = []
    for name in names:
        if name in ("identity", "hflip", "vflip"):
            out.append(Transform(name))
            continue
        if name.startswith("rescale:"):
            try:
                f = float(name.split(":", 1)[1])
            except ValueError:
                f = -1.0
            if 0 < f <= 1:
                out.append(Transform(name))
                continue
        raise ValueError(f"transform {name!r} has no mask inverse "
                         "(use identity, hflip, vflip or rescale:<f> with 0<f<=1)")
    if not out:
        raise ValueError("transform set is empty")
    return out


# predictors --------------------------------------------------------------------

class ModelPredictor:
    """Score-selected soft mask of a multi-mask network."""

    def __init__(self, params, cfg: nm.ModelConfig, bn_state=None, batch_size: int = 64):
        self.params, self.cfg, self.bn_state, self.batch_size = params, cfg, bn_state, batch_size

    def __call__(self, images: np.ndarray) -> np.ndarray:
        dtype = next(iter(self.params.values())).dtype
        out = nm.predict(self.params, np.asarray(images, dtype=dtype), self.cfg, self.bn_state, self.batch_size)
        return out.selected_masks()


def _binary_iou_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter = np.logical_and(a, b).sum(axis=(-2, -1))
    union = np.logical_or(a, b).sum(axis=(-2, -1))
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def consistency_scores(model, images: np.ndarray, transforms=DEFAULT_TRANSFORMS,
                       references: np.ndarray | None = None) -> np.ndarray:
    """Per-image mean binary IoU between transformed and reference predictions.

    Without ``references`` the reference is the model's own prediction on the
    untransformed image (gt-free filtering); with them (e.g. held-out gt) each
    back-transformed prediction is compared against the given masks.
    """
    ts = parse_transforms(transforms) if not transforms or isinstance(transforms[0], str) else list(transforms)
    images = np.asarray(images)
    if references is None:
        ref = np.asarray(model(images)) >= 0.5
    else:
        ref = np.asarray(references) > 0.5
    total = np.zeros(len(images))
    for t in ts:
        pred = t.invert_mask(np.asarray(model(t.apply(images)))) >= 0.5
        total += _binary_iou_rows(pred, ref)
    return total / len(ts)


def consistency_score(model, image: np.ndarray, transforms=DEFAULT_TRANSFORMS) -> float:
    """kappa for one (3,H,W) image."""
    return float(consistency_scores(model, np.asarray(image)[None], transforms)[0])


# mask checks ---------------------------------------------------------------------

def component_areas(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=FOUR_CONNECTED)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(labels.ravel(), minlength=n + 1)[1:]


def component_check(mask: np.ndarray, max_components: int = 5, main_frac: float = 0.005) -> tuple[int, bool]:
    """Count of 4-connected components holding at least ``main_frac`` of the foreground."""
    areas = component_areas(mask)
    if areas.sum() == 0:
        return 0, False
    count = int((areas >= main_frac * areas.sum()).sum())
    return count, 1 <= count <= max_components


def coverage_check(pred: np.ndarray, ref: np.ndarray, min_coverage: float = 0.70) -> tuple[float, bool]:
    """Fraction of the reference object covered by the prediction (strictly above the bound passes)."""
    ref = np.asarray(ref) > 0
    n = ref.sum()
    if n == 0:
        raise ValueError("reference object mask is empty")
    frac = float(np.logical_and(np.asarray(pred) > 0, ref).sum() / n)
    return frac, frac > min_coverage


def presence_check(mask: np.ndarray, min_area: float = 0.01) -> tuple[float, bool]:
    """Largest component area as a fraction of the image."""
    areas = component_areas(mask)
    frac = float(areas.max() / np.asarray(mask).size) if len(areas) else 0.0
    return frac, frac >= min_area


# pipeline -----------------------------------------------------------------------

@dataclass
class FilterConfig:
    tau: float = 0.8
    max_components: int = 5
    main_component_frac: float = 0.005
    min_coverage: float = 0.70
    min_presence: float = 0.01
    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS
    stages: tuple[str, ...] = STAGES

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        self.stages = tuple(self.stages)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown filter stages {bad}; known: {STAGES}")
        if not 0 <= self.tau <= 1 or not 0 <= self.min_coverage <= 1:
            raise ValueError("tau and min_coverage must lie in [0, 1]")
        if self.max_components < 1:
            raise ValueError("max_components must be >= 1")
        parse_transforms(self.transforms)

    def to_dict(self):
        d = asdict(self)
        d["transforms"], d["stages"] = list(self.transforms), list(self.stages)
        return d


@dataclass
class FilterVerdict:
    id: str
    kept: bool
    consistency: float | None = None
    components: int | None = None
    coverage: float | None = None
    presence: float | None = None
    reason: str = ""
    failed: list[str] = field(default_factory=list)

    def record(self) -> dict:
        return {"kappa": self.consistency, "components": self.components,
                "coverage": self.coverage, "presence": self.presence}


def filter_dataset(model, samples, cfg: FilterConfig | None = None, labels=None):
    """Run the enabled stages on every sample.

    ``labels`` are the masks being vetted (defaults to each sample's mask);
    coverage compares them against the generator's designated object.  Every
    enabled stage is evaluated so the kept set does not depend on stage order;
    the reject reason is the first failing stage in :data:`STAGES` order.
    Returns (kept samples, verdicts, summary).
    """
    cfg = cfg or FilterConfig()
    samples = list(samples)
    labels = [s.mask for s in samples] if labels is None else list(labels)
    if len(labels) != len(samples):
        raise ValueError("labels and samples differ in length")
    kappa = None
    if "consistency" in cfg.stages and samples:
        kappa = consistency_scores(model, np.stack([s.chw() for s in samples]), cfg.transforms)
    verdicts = []
    for i, (s, lab) in enumerate(zip(samples, labels)):
        v = FilterVerdict(s.id, True)
        passed = {}
        if kappa is not None:
            v.consistency = float(kappa[i])
            passed["consistency"] = v.consistency >= cfg.tau
        if "components" in cfg.stages:
            v.components, passed["components"] = component_check(lab, cfg.max_components, cfg.main_component_frac)
        if "coverage" in cfg.stages:
            v.coverage, passed["coverage"] = coverage_check(lab, s.mask, cfg.min_coverage)
        if "presence" in cfg.stages:
            v.presence, passed["presence"] = presence_check(lab, cfg.min_presence)
        v.failed = [st for st in STAGES if passed.get(st) is False]
        v.kept = not v.failed
        v.reason = v.failed[0] if v.failed else ""
        if not v.kept:
            log.debug("reject %s: %s %s", s.id, v.reason, v.record())
        verdicts.append(v)
    kept = [s for s, v in zip(samples, verdicts) if v.kept]
    return kept, verdicts, summarize(verdicts, cfg.stages)


def summarize(verdicts: list[FilterVerdict], stages=STAGES) -> dict:
    n = len(verdicts)
    rejected = sum(not v.kept for v in verdicts)
    per_stage = {}
    for st in stages:
        failed = sum(st in v.failed for v in verdicts)
        first = sum(v.reason == st for v in verdicts)
        per_stage[st] = {"failed": failed, "first_reason": first,
                         "failed_fraction": failed / n if n else 0.0}
    return {"n": n, "kept": n - rejected, "rejected": rejected,
            "rejected_fraction": rejected / n if n else 0.0, "stages": per_stage}


def verdict_records(samples, verdicts: list[FilterVerdict]) -> list[dict]:
    """Manifest records carrying filter status, reason and per-stage values."""
    from .scenegen import manifest_record

    return [manifest_record(s, "kept" if v.kept else "rejected", v.reason, **v.record())
            for s, v in zip(samples, verdicts)]
