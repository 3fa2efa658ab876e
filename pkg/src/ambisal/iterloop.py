"""Labeler training, dataset labelling, category scoring and the reweighting loop.

One round: draw categories from the current weights, generate scenes, build
proxy modalities, label them with the labeler, filter, continue training
the student on everything kept so far, score each category on a frozen
held-out set and update the weights for the next round.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import curation as cu
from . import metrics as mt
from . import netmodel as nm
from . import scenegen as sg
from .config import RunConfig
from .training import TrainConfig, TrainState, train

log = logging.getLogger(__name__)

# stream tags for derived seeds
_TAG_GENERATE, _TAG_HELDOUT, _TAG_SEEDSET, _TAG_MODALITY, _TAG_INIT = 1, 2, 3, 4, 5


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1, dtype=np.uint32)[0])


# weights ---------------------------------------------------------------------------

def update_weights(kappa, alpha: float = 8.0, beta: float = 0.5, w_min: float | None = None,
                   w_new: float | None = None, clamp: bool = True) -> np.ndarray:
    """w_i = w_min + w_new * min(1, exp(-alpha (kappa_i - beta))); unnormalised."""
    kappa = np.asarray(kappa, dtype=np.float64)
    n = len(kappa)
    if n == 0:
        raise ValueError("no categories")
    if np.any(~np.isfinite(kappa)) or np.any(kappa < 0) or np.any(kappa > 1):
        raise ValueError("category scores must lie in [0, 1]")
    w_min = 1.0 / n if w_min is None else w_min
    w_new = 4.0 / n if w_new is None else w_new
    boost = np.exp(-alpha * (kappa - beta))
    if clamp:
        boost = np.minimum(boost, 1.0)
    return w_min + w_new * boost


# labeler -----------------------------------------------------------------------------

def labeler_config(model: nm.ModelConfig, size: int, modalities=("semantic", "generative", "concept")) -> nm.ModelConfig:
    return dataclasses.replace(model, height=size, width=size, heads=1, modality_input=True,
                               modalities=tuple(modalities))


def train_labeler(bundle: nm.ModalityBundle, gt: np.ndarray, mcfg: nm.ModelConfig, cfg: TrainConfig) -> TrainState:
    """Fusion network with one head, supervised by generator gt with the mask loss only."""
    if not mcfg.modality_input or mcfg.heads != 1:
        raise ValueError("labeler needs modality input and a single head")
    cfg = dataclasses.replace(cfg, mask_only=True)
    return train(nm.init_params(mcfg, np.dtype(cfg.dtype)), bundle, gt, mcfg, cfg)


def label_dataset(labeler: TrainState, mcfg: nm.ModelConfig, bundle: nm.ModalityBundle):
    """Binary labels (threshold 0.5) and the soft masks they came from."""
    dtype = next(iter(labeler.params.values())).dtype
    soft = nm.predict(labeler.params, bundle.astype(dtype), mcfg, labeler.bn_state).masks[:, 0]
    return (soft >= 0.5).astype(np.uint8), soft


def decoding_iou(labels: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.array([mt.iou_binary(lab, g) for lab, g in zip(labels, gt)])


# category scoring ---------------------------------------------------------------------

def category_scores(model, samples, n_categories: int, transforms=cu.DEFAULT_TRANSFORMS) -> np.ndarray:
    """Per-category mean of kappa against gt, averaged over identity plus ``transforms``."""
    names = ("identity",) + tuple(t for t in transforms if t != "identity")
    images = np.stack([s.chw() for s in samples])
    gts = np.stack([s.mask for s in samples])
    kappa = cu.consistency_scores(model, images, names, references=gts)
    cats = np.array([s.category for s in samples])
    out = np.zeros(n_categories)
    for c in range(n_categories):
        sel = cats == c
        if not sel.any():
            raise ValueError(f"no held-out samples for category {c}")
        out[c] = kappa[sel].mean()
    return out


# round state ----------------------------------------------------------------------------

@dataclass
class RoundState:
    round: int
    weights: list[float]                  # weights used to generate this round
    next_weights: list[float] = field(default_factory=list)
    kappa: list[float] = field(default_factory=list)
    category_iou: list[float] = field(default_factory=list)
    generated: int = 0
    kept_ids: list[str] = field(default_factory=list)
    rejected_ids: list[str] = field(default_factory=list)
    label_iou: float = float("nan")
    filter_summary: dict = field(default_factory=dict)
    counts: list[int] = field(default_factory=list)

    @property
    def probabilities(self) -> np.ndarray:
        return sg.normalize_weights(self.weights)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["probabilities"] = self.probabilities.tolist()
        return d


@dataclass
class Models:
    labeler: TrainState | None = None
    labeler_cfg: nm.ModelConfig | None = None
    filter: TrainState | None = None
    filter_cfg: nm.ModelConfig | None = None
    student: TrainState | None = None
    student_cfg: nm.ModelConfig | None = None


@dataclass
class PipelineResult:
    states: list[RoundState]
    models: Models
    reports: dict[str, mt.MetricsReport]
    out_dir: Path | None = None


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Pipeline:
    """Stateful controller; :func:`run_pipeline` drives it for R rounds."""

    def __init__(self, run: RunConfig, out_dir=None):
        self.run = run
        g = run.generator
        self.categories = sg.make_categories(g.n_categories, tuple(g.hard_categories), tuple(g.hard_similarity))
        self.ambiguity = sg.AmbiguitySpec(g.p_amb, g.k_max) if g.p_amb > 0 else None
        self.size = (g.size, g.size)
        self.dtype = run.precision
        self.train_cfg = dataclasses.replace(run.train, dtype=run.precision, seed=derive_seed(run.seed, _TAG_INIT))
        self.models = Models()
        self.pool_images: list[np.ndarray] = []
        self.pool_labels: list[np.ndarray] = []
        self.states: list[RoundState] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        n = g.n_categories
        self.heldout = sg.generate_dataset(
            self.categories, n * run.scaled(run.loop.heldout_per_category), derive_seed(run.seed, _TAG_HELDOUT),
            0, ambiguity=self.ambiguity, size=self.size,
            category_ids=np.repeat(np.arange(n), run.scaled(run.loop.heldout_per_category)))

    # setup -------------------------------------------------------------------------

    def _model_cfg(self, **kw) -> nm.ModelConfig:
        return dataclasses.replace(self.run.model, height=self.size[0], width=self.size[1],
                                   seed=derive_seed(self.run.seed, _TAG_INIT), **kw)

    def prepare(self) -> None:
        """Seed set, labeler and filter model; both trained on generator gt."""
        run, loop = self.run, self.run.loop
        seed_set = sg.generate_dataset(self.categories, run.scaled(loop.seed_set_size),
                                       derive_seed(run.seed, _TAG_SEEDSET), 0,
                                       ambiguity=self.ambiguity, size=self.size)
        gt = sg.stack_masks(seed_set)
        if loop.labels == "labeler":
            lcfg = self._model_cfg(heads=1, modality_input=True)
            bundle = sg.bundle_for(seed_set, run.generator.corruption, derive_seed(run.seed, _TAG_MODALITY))
            tcfg = dataclasses.replace(self.train_cfg, epochs=loop.labeler_epochs)
            self.models.labeler = train_labeler(bundle, gt, lcfg, tcfg)
            self.models.labeler_cfg = lcfg
        if loop.filter_enabled and "consistency" in run.curation.stages:
            fcfg = self._model_cfg(heads=1, modality_input=False)
            tcfg = dataclasses.replace(self.train_cfg, epochs=loop.filter_epochs, mask_only=True)
            self.models.filter = train(nm.init_params(fcfg, np.dtype(self.dtype)),
                                       sg.stack_images(seed_set), gt, fcfg, tcfg)
            self.models.filter_cfg = fcfg
        self.models.student_cfg = self._model_cfg(modality_input=False)

    # rounds ---------------------------------------------------------------------------

    def round_budget(self, r: int, weights) -> np.ndarray:
        run = self.run
        n = len(self.categories)
        per_cat = run.scaled(run.loop.per_category)
        if r == 1:
            return np.full(n, per_cat, dtype=int)
        return sg.allocate_budget(weights, (n * per_cat) // 2)

    def run_round(self, r: int, weights) -> RoundState:
        run, loop = self.run, self.run.loop
        state = RoundState(r, [float(w) for w in weights])
        counts = self.round_budget(r, weights)
        state.counts = counts.tolist()
        cat_ids = np.repeat(np.arange(len(counts)), counts)
        samples = sg.generate_dataset(self.categories, len(cat_ids), derive_seed(run.seed, _TAG_GENERATE), r,
                                      ambiguity=self.ambiguity, size=self.size, category_ids=cat_ids)
        state.generated = len(samples)
        gt = np.stack([s.mask for s in samples])
        if loop.labels == "labeler":
            bundle = sg.bundle_for(samples, run.generator.corruption, derive_seed(run.seed, _TAG_MODALITY))
            labels, _ = label_dataset(self.models.labeler, self.models.labeler_cfg, bundle)
        else:
            labels = gt.astype(np.uint8)
        state.label_iou = float(decoding_iou(labels, gt).mean())

        if loop.filter_enabled:
            predictor = (cu.ModelPredictor(self.models.filter.params, self.models.filter_cfg,
                                           self.models.filter.bn_state)
                         if self.models.filter is not None else None)
            _, verdicts, summary = cu.filter_dataset(predictor, samples, run.curation, labels)
        else:
            verdicts = [cu.FilterVerdict(s.id, True) for s in samples]
            summary = cu.summarize(verdicts, ())
        state.filter_summary = summary
        keep = np.array([v.kept for v in verdicts], dtype=bool)
        state.kept_ids = [s.id for s, k in zip(samples, keep) if k]
        state.rejected_ids = [s.id for s, k in zip(samples, keep) if not k]
        log.info("round %d: generated %d, kept %d, label IoU %.3f", r, len(samples), keep.sum(), state.label_iou)

        if keep.any():
            self.pool_images.append(sg.stack_images([s for s, k in zip(samples, keep) if k]))
            self.pool_labels.append(labels[keep].astype(np.float32))
        self._train_student()
        self._score(state)
        state.next_weights = update_weights(state.kappa, loop.alpha, loop.beta, loop.w_min,
                                            loop.w_new, loop.clamp).tolist()
        if self.out_dir is not None:
            self._persist(state, samples, labels, verdicts)
        self.states.append(state)
        return state

    def _train_student(self) -> None:
        mcfg = self.models.student_cfg
        if not self.pool_images:
            log.warning("training pool is empty; student left unchanged")
            if self.models.student is None:
                dtype = np.dtype(self.dtype)
                self.models.student = TrainState(nm.init_params(mcfg, dtype), nm.init_bn_state(mcfg, dtype))
            return
        x = np.concatenate(self.pool_images)
        y = np.concatenate(self.pool_labels)
        tcfg = dataclasses.replace(self.train_cfg, epochs=self.run.loop.student_epochs)
        prev = self.models.student
        if prev is None or self.run.loop.from_scratch:
            params = nm.init_params(mcfg, np.dtype(self.dtype))
            self.models.student = train(params, x, y, mcfg, tcfg)
        else:
            self.models.student = train(prev.params, x, y, mcfg, tcfg, state=prev)

    def student_predictor(self) -> cu.ModelPredictor:
        st = self.models.student
        return cu.ModelPredictor(st.params, self.models.student_cfg, st.bn_state)

    def _score(self, state: RoundState) -> None:
        n = len(self.categories)
        state.kappa = category_scores(self.student_predictor(), self.heldout, n, self.run.curation.transforms).tolist()
        report = self.heldout_report("selected")
        cats = np.array([s.category for s in self.heldout])
        ious = np.array([rec["iou"] for rec in report.per_sample])
        state.category_iou = [float(ious[cats == c].mean()) for c in range(n)]
        self._last_reports = {"selected": report, "oracle_best": self.heldout_report("oracle_best")}

    def heldout_report(self, mode: str) -> mt.MetricsReport:
        st = self.models.student
        x = sg.stack_images(self.heldout).astype(self.dtype)
        out = nm.predict(st.params, x, self.models.student_cfg, st.bn_state)
        gts = [s.mask for s in self.heldout]
        return mt.evaluate_dataset(list(out.masks), gts, mode, scores=list(out.scores), dataset="heldout")

    def _persist(self, state: RoundState, samples, labels, verdicts) -> None:
        root = self.out_dir / "rounds" / str(state.round)
        records = cu.verdict_records(samples, verdicts)
        for rec in records:
            rec["label_source"] = self.run.loop.labels
            rec["label_quantization"] = "binary threshold 0.5, stored 0/255"
        sg.write_dataset(root, samples, records, masks=list(labels))
        with open(root / "weights.json", "w") as fh:
            json.dump({"round": state.round, "weights": state.weights, "next_weights": state.next_weights,
                       "kappa": state.kappa}, fh, indent=2, sort_keys=True)
        st = self.models.student
        nm.save_checkpoint(root / "checkpoint.npz", st.params, self.models.student_cfg, st.bn_state,
                           {"round": state.round, "epochs_done": st.epochs_done})
        write_report(root / "report", self._last_reports, state)


def write_report(stem: Path, reports: dict[str, mt.MetricsReport], state: RoundState | None = None) -> None:
    stem = Path(stem)
    payload = {mode: json.loads(rep.to_json()) for mode, rep in reports.items()}
    if state is not None:
        payload["round"] = state.to_dict()
    stem.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    rows = [rep.to_csv(header=i == 0) for i, rep in enumerate(reports.values())]
    stem.with_suffix(".csv").write_text("".join(rows))


def run_pipeline(run: RunConfig, out_dir=None) -> PipelineResult:
    """R rounds of generate, label, filter, train, score and reweight."""
    pipe = Pipeline(run, out_dir)
    if pipe.out_dir is not None:
        from .config import save_config

        pipe.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(run, pipe.out_dir / "config.json")
    pipe.prepare()
    n = len(pipe.categories)
    weights = np.full(n, 1.0 / n)
    for r in range(1, run.loop.rounds + 1):
        state = pipe.run_round(r, weights)
        weights = np.asarray(state.next_weights)
    reports = pipe._last_reports
    if pipe.out_dir is not None:
        write_report(pipe.out_dir / "final_report", reports)
        history = [{"round": s.round, "weights": s.weights, "next_weights": s.next_weights,
                    "kappa": s.kappa} for s in pipe.states]
        (pipe.out_dir / "weights_history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
    return PipelineResult(pipe.states, pipe.models, reports, pipe.out_dir)

