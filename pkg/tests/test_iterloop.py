import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ambisal import config as cf
from ambisal import iterloop as il
from ambisal import netmodel as nm
from ambisal import scenegen as sg
from ambisal import training as tr


def test_update_weights_closed_forms():
    n = 16
    w = il.update_weights(np.array([0.5, 1.0, 0.0, 0.75] + [0.5] * 12))
    assert w[0] == pytest.approx(1 / n + 4 / n)
    assert w[1] == pytest.approx(1 / n + 4 / n * math.exp(-4))
    assert w[2] == pytest.approx(1 / n + 4 / n)           # clamped
    assert w[3] == pytest.approx(1 / n + 4 / n * math.exp(-2))
    unclamped = il.update_weights(np.array([0.0, 1.0]), clamp=False)
    assert unclamped[0] == pytest.approx(0.5 + 2 * math.exp(4))


def test_update_weights_overrides():
    w = il.update_weights([0.5, 0.9], alpha=2.0, beta=0.9, w_min=0.1, w_new=1.0)
    np.testing.assert_allclose(w, [1.1, 1.1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=20))
def test_update_weights_monotone_and_bounded(kappa):
    kappa = np.array(kappa)
    w = il.update_weights(kappa)
    n = len(kappa)
    assert np.all(w >= 1 / n) and np.all(w <= 5 / n + 1e-15)
    order = np.argsort(kappa)
    assert np.all(np.diff(w[order]) <= 1e-15)


@pytest.mark.parametrize("kappa", [[], [0.5, 1.2], [np.nan]])
def test_update_weights_rejects_bad_scores(kappa):
    with pytest.raises(ValueError):
        il.update_weights(kappa)


def test_derive_seed_streams():
    assert il.derive_seed(0, 1) == il.derive_seed(0, 1)
    assert len({il.derive_seed(s, t) for s in range(3) for t in range(1, 6)}) == 15


def test_category_scores_with_stub():
    cats = sg.make_categories(3)
    samples = sg.generate_dataset(cats, 6, seed=0, size=(32, 32), category_ids=[0, 0, 1, 1, 2, 2])
    gt = {s.id: s.mask for s in samples}
    order = [s.id for s in samples]

    def oracle(images):
        # returns gt for untransformed images only; flipped queries get flipped gt back
        out = []
        for img in images:
            for s in samples:
                for t in ((lambda a: a), np.fliplr, np.flipud):
                    if np.array_equal(img, t(s.chw().transpose(1, 2, 0)).transpose(2, 0, 1)):
                        out.append(t(gt[s.id]).astype(float))
                        break
                else:
                    continue
                break
        return np.stack(out)

    kappa = il.category_scores(oracle, samples, 3, ("hflip", "vflip"))
    np.testing.assert_allclose(kappa, 1.0)
    assert order == [s.id for s in samples]
    with pytest.raises(ValueError):
        il.category_scores(oracle, samples, 4, ("hflip",))


def tiny_run(**loop):
    base = dict(rounds=2, per_category=4, heldout_per_category=2, seed_set_size=12,
                student_epochs=1, labeler_epochs=1, filter_epochs=1)
    base.update(loop)
    return cf.RunConfig(
        model=nm.ModelConfig(height=16, width=16, widths=(4, 8), fusion_width=4, modality_width=4),
        generator=cf.GeneratorConfig(size=16, n_categories=3, hard_categories=(1,)),
        loop=cf.LoopConfig(**base), train=tr.TrainConfig(batch_size=8), seed=5)


def test_round_budgets():
    pipe = il.Pipeline(tiny_run())
    assert pipe.round_budget(1, None).tolist() == [4, 4, 4]
    assert pipe.round_budget(2, [2.0, 1.0, 1.0]).tolist() == [3, 2, 1]
    assert len(pipe.heldout) == 6


def test_pipeline_outputs_and_determinism(tmp_path):
    a = il.run_pipeline(tiny_run(), tmp_path / "a")
    b = il.run_pipeline(tiny_run(), tmp_path / "b")
    assert [s.to_dict() for s in a.states] == [s.to_dict() for s in b.states]
    for rel in ("final_report.json", "weights_history.json", "rounds/1/manifest.jsonl",
                "rounds/2/weights.json", "rounds/2/checkpoint.npz"):
        assert il.file_hash(tmp_path / "a" / rel) == il.file_hash(tmp_path / "b" / rel)
    history = json.loads((tmp_path / "a" / "weights_history.json").read_text())
    assert history[1]["weights"] == history[0]["next_weights"]
    records, _, _ = sg.read_dataset(tmp_path / "a" / "rounds" / "1")
    assert len(records) == 12
    assert {r["filter_status"] for r in records} <= {"kept", "rejected"}
    assert all(r["label_source"] == "labeler" for r in records)
    state = a.states[0]
    assert len(state.kept_ids) + len(state.rejected_ids) == state.generated
    assert state.probabilities.sum() == pytest.approx(1.0)


def test_pipeline_gt_labels_without_filter():
    res = il.run_pipeline(tiny_run(rounds=1, labels="gt", filter_enabled=False))
    state = res.states[0]
    assert state.label_iou == 1.0
    assert state.rejected_ids == []
    assert res.models.labeler is None and res.models.filter is None
