"""Command-line entry point.

    ambisal generate --config run.yaml --out data/
    ambisal train    --config run.yaml --out runs/student [--data data/]
    ambisal eval     PRED_DIR GT_DIR [--out report]
    ambisal filter   --config run.yaml --data data/ --out filtered/
    ambisal loop     --config run.yaml --out runs/loop
    ambisal gradcheck
    ambisal oracle
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import curation as cu
from . import metrics as mt
from . import netmodel as nm
from . import rasterio as rio
from . import scenegen as sg
from .iterloop import _TAG_GENERATE, _TAG_HELDOUT, _TAG_INIT, _TAG_SEEDSET, derive_seed, run_pipeline, write_report
from .training import train

log = logging.getLogger("ambisal")

MASK_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")


class CommandError(RuntimeError):
    pass


def load_run(args) -> cf.RunConfig:
    run = cf.load_config(args.config) if args.config else cf.RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.scale is not None:
        updates["scale"] = args.scale
    if args.out is not None:
        updates["out"] = str(args.out)
    return dataclasses.replace(run, **updates) if updates else run


def _categories(run):
    g = run.generator
    return sg.make_categories(g.n_categories, tuple(g.hard_categories), tuple(g.hard_similarity))


def _ambiguity(run):
    g = run.generator
    return sg.AmbiguitySpec(g.p_amb, g.k_max) if g.p_amb > 0 else None


def _generate(run, count, tag, round_id=0):
    g = run.generator
    return sg.generate_dataset(_categories(run), count, derive_seed(run.seed, tag), round_id,
                               ambiguity=_ambiguity(run), size=(g.size, g.size))


def _model_cfg(run, **kw):
    size = run.generator.size
    return dataclasses.replace(run.model, height=size, width=size, seed=derive_seed(run.seed, _TAG_INIT), **kw)


# verbs ------------------------------------------------------------------------------------

def cmd_generate(run: cf.RunConfig) -> Path:
    samples = _generate(run, run.scaled(run.generator.count), _TAG_GENERATE)
    out = Path(run.out)
    sg.write_dataset(out, samples)
    cf.save_config(run, out / "config.json")
    log.info("wrote %d samples to %s", len(samples), out)
    return out


def _dataset_samples(root) -> tuple[list[dict], np.ndarray, np.ndarray]:
    root = Path(root)
    if not (root / "manifest.jsonl").exists():
        raise CommandError(f"{root}: no manifest.jsonl (expected a directory written by 'generate')")
    return sg.read_dataset(root)


def cmd_train(run: cf.RunConfig, data=None, mode: str = "selected") -> Path:
    out = Path(run.out)
    if data is not None:
        _, images, masks = _dataset_samples(data)
        x = images.transpose(0, 3, 1, 2)
        y = masks.astype(np.float32)
    else:
        samples = _generate(run, run.scaled(run.generator.count), _TAG_GENERATE)
        x, y = sg.stack_images(samples), sg.stack_masks(samples)
    mcfg = _model_cfg(run, modality_input=False)
    if x.shape[2:] != (mcfg.height, mcfg.width):
        mcfg = dataclasses.replace(mcfg, height=x.shape[2], width=x.shape[3])
    tcfg = dataclasses.replace(run.train, dtype=run.precision, seed=derive_seed(run.seed, _TAG_INIT))
    state = train(nm.init_params(mcfg, np.dtype(run.precision)), x, y, mcfg, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    nm.save_checkpoint(out / "checkpoint.npz", state.params, mcfg, state.bn_state,
                       {"epochs_done": state.epochs_done})
    (out / "losses.json").write_text(json.dumps(state.losses) + "\n")
    cf.save_config(run, out / "config.json")

    heldout = _generate(run, run.scaled(run.generator.count // 5 or 1), _TAG_HELDOUT)
    if heldout[0].mask.shape == (mcfg.height, mcfg.width):
        pred = nm.predict(state.params, sg.stack_images(heldout).astype(run.precision), mcfg, state.bn_state)
        report = mt.evaluate_dataset(list(pred.masks), [s.mask for s in heldout], mode,
                                     scores=list(pred.scores), dataset="heldout")
        write_report(out / "report", {mode: report})
        print(report.to_csv(), end="")
    return out


def _mask_files(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise CommandError(f"{root} is not a directory")
    files = {p.stem: p for p in sorted(root.iterdir()) if p.suffix.lower() in MASK_SUFFIXES}
    if not files:
        raise CommandError(f"{root}: no mask rasters found")
    return files


def cmd_eval(pred_dir, gt_dir, out=None, mode: str = "selected") -> mt.MetricsReport:
    """Compare two directories of masks matched by file stem."""
    preds, gts = _mask_files(Path(pred_dir)), _mask_files(Path(gt_dir))
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise CommandError(f"id mismatch between {pred_dir} and {gt_dir}: "
                           f"missing predictions {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                           f"unmatched predictions {extra[:5]}{'...' if len(extra) > 5 else ''}")
    ids = sorted(gts)
    p_arr, g_arr = [], []
    for i in ids:
        p = rio.read_soft_mask(preds[i])
        g = rio.read_mask(gts[i])
        if p.shape != g.shape:
            raise CommandError(f"{i}: prediction shape {p.shape} differs from ground truth {g.shape}")
        p_arr.append(p)
        g_arr.append(g)
    # a single mask per id: selected and oracle_best coincide
    report = mt.evaluate_dataset(p_arr, g_arr, "oracle_best", dataset=Path(gt_dir).name, e_variant="max")
    report.mode = mode
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_report(Path(out), {mode: report})
    return report


def cmd_filter(run: cf.RunConfig, data) -> dict:
    """Vet a dataset directory.

    Masks under ``labels/`` (same ids) are the labels being vetted and
    ``masks/`` is the coverage reference; without ``labels/`` the stored
    masks are vetted against themselves, so only consistency, component and
    presence checks can fail.
    """
    records, images, masks = _dataset_samples(data)
    label_dir = Path(data) / "labels"
    if label_dir.is_dir():
        labels = [rio.read_mask(label_dir / f"{r['id']}.png") for r in records]
    else:
        labels = list(masks)
    samples = [sg.Sample(image=img, mask=m, candidates=m[None], category=int(r.get("category", 0)),
                         round=int(r.get("round", 0)), seed=(), id=r["id"])
               for r, img, m in zip(records, images, masks)]
    predictor = None
    if "consistency" in run.curation.stages:
        seed_set = _generate(run, run.scaled(run.loop.seed_set_size), _TAG_SEEDSET)
        mcfg = _model_cfg(run, heads=1, modality_input=False)
        mcfg = dataclasses.replace(mcfg, height=images.shape[1], width=images.shape[2])
        if seed_set[0].mask.shape != images.shape[1:3]:
            raise CommandError(f"dataset resolution {images.shape[1:3]} differs from generator.size")
        tcfg = dataclasses.replace(run.train, dtype=run.precision, seed=derive_seed(run.seed, _TAG_INIT),
                                   epochs=run.loop.filter_epochs, mask_only=True)
        st = train(nm.init_params(mcfg, np.dtype(run.precision)), sg.stack_images(seed_set),
                   sg.stack_masks(seed_set), mcfg, tcfg)
        predictor = cu.ModelPredictor(st.params, mcfg, st.bn_state)
    _, verdicts, summary = cu.filter_dataset(predictor, samples, run.curation, labels)
    out = Path(run.out)
    new_records = []
    for rec, v in zip(records, verdicts):
        rec = dict(rec)
        rec.update(v.record())
        rec["filter_status"] = "kept" if v.kept else "rejected"
        rec["filter_reason"] = v.reason
        new_records.append(rec)
    sg.write_dataset(out, samples, new_records, masks=labels)
    (out / "filter_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for v in verdicts:
        if not v.kept:
            log.info("rejected %s: %s", v.id, v.reason)
    return summary


def cmd_loop(run: cf.RunConfig, mode: str = "selected"):
    res = run_pipeline(run, run.out)
    print(res.reports[mode].to_csv(), end="")
    return res


def cmd_gradcheck() -> bool:
    from .gradcheck import run_all

    ok = True
    for res in run_all():
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name}: max rel err {res.max_rel_err:.2e} "
              f"(tol {res.tolerance:.0e}, {res.instances} instances)")
        ok &= res.passed
    return ok


def cmd_oracle(pairs: int = 200, seed: int = 0, tol: float = 1e-9) -> bool:
    from . import oracles

    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(("mae", "f_measure_max", "s_measure", "e_measure", "iou_binary"), 0.0)
    for _ in range(pairs):
        pred = rng.random((32, 32))
        gt = (rng.random((32, 32)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
        for name in worst:
            worst[name] = max(worst[name], abs(getattr(mt, name)(pred, gt) - getattr(oracles, name)(pred, gt)))
    for name, err in worst.items():
        print(f"{'PASS' if err <= tol else 'FAIL'} {name}: max abs diff {err:.2e} over {pairs} pairs")
    return all(err <= tol for err in worst.values())


# argument parsing --------------------------------------------------------------------------

def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run config")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--out", type=Path)
    common.add_argument("--scale", type=float)
    common.add_argument("--mode", choices=("selected", "oracle_best"), default="selected")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ambisal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("generate", parents=[common], help="write a generated dataset")
    p = sub.add_parser("train", parents=[common], help="train the multi-mask student")
    p.add_argument("--data", type=Path, help="dataset directory (default: generate one)")
    p = sub.add_parser("eval", parents=[common], help="score a directory of predicted masks")
    p.add_argument("pred_dir", type=Path)
    p.add_argument("gt_dir", type=Path)
    p = sub.add_parser("filter", parents=[common], help="filter a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    sub.add_parser("loop", parents=[common], help="run the iterative generation loop")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("oracle", parents=[common], help="compare metrics against naive implementations")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "eval":
            report = cmd_eval(args.pred_dir, args.gt_dir, args.out, args.mode)
            print(report.to_csv(), end="")
            return 0
        if args.verb == "gradcheck":
            return 0 if cmd_gradcheck() else 1
        if args.verb == "oracle":
            return 0 if cmd_oracle(seed=args.seed or 0) else 1
        run = load_run(args)
        if args.verb == "generate":
            cmd_generate(run)
        elif args.verb == "train":
            cmd_train(run, args.data, args.mode)
        elif args.verb == "filter":
            summary = cmd_filter(run, args.data)
            print(json.dumps(summary, sort_keys=True))
        elif args.verb == "loop":
            cmd_loop(run, args.mode)
        return 0
    except (CommandError, cf.ConfigError, rio.RasterError, sg.SceneGenerationError, ValueError,
            FloatingPointError, OSError) as exc:
        print(f"ambisal {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
