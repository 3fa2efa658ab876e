import numpy as np
import pytest
from scipy import ndimage, stats

from ambisal import scenegen as sg
from ambisal.curation import FOUR_CONNECTED

CATS = sg.make_categories(16, hard=(3,))


def test_category_grid():
    cats = sg.make_categories(32)
    assert len(cats) == 32
    assert {c.shape for c in cats} == set(sg.SHAPES)
    assert {c.texture for c in cats} == set(sg.TEXTURES)
    assert len({(c.shape, c.texture, round(c.hue, 6)) for c in cats}) == 32
    assert all(len(c.variation_axes) >= 10 for c in cats)


def test_hard_category_similarity():
    assert CATS[3].background_similarity[0] >= 0.8
    assert CATS[2].background_similarity[1] < 0.8


@pytest.mark.parametrize("kwargs", [
    {"size_range": (0.3, 0.1)}, {"clutter_range": (0, 9)}, {"occlusion_range": (0.0, 0.3)},
    {"background_similarity": (0.5, 1.2)}, {"shape": "star"},
])
def test_category_validation(kwargs):
    base = {"id": 0, "shape": "ellipse", "texture": "flat"}
    base.update(kwargs)
    with pytest.raises(ValueError):
        sg.CategorySpec(**base)


def test_sample_category_one_hot():
    rng = np.random.default_rng(0)
    w = np.zeros(5)
    w[3] = 1
    assert all(sg.sample_category(w, rng) == 3 for _ in range(200))


def test_sample_category_rejects_zero_weights():
    with pytest.raises(ValueError):
        sg.sample_category(np.zeros(4), np.random.default_rng(0))


def test_sample_category_uniform_frequencies():
    rng = np.random.default_rng(1)
    n = 16_000
    counts = np.bincount([sg.sample_category(np.ones(16), rng) for _ in range(n)], minlength=16)
    p = 1 / 16
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_sample_category_weighted_chi2():
    rng = np.random.default_rng(2)
    draws = [sg.sample_category([2, 1, 1], rng) for _ in range(8000)]
    counts = np.bincount(draws, minlength=3)
    assert stats.chisquare(counts, 8000 * np.array([0.5, 0.25, 0.25])).pvalue > 0.001


def test_allocate_budget():
    counts = sg.allocate_budget([1, 1, 2], 10)
    assert counts.sum() == 10
    assert counts.tolist() == [3, 2, 5]  # ties go to the lower index
    assert sg.allocate_budget(np.ones(16), 1600).tolist() == [100] * 16


def test_no_ambiguity_gives_single_candidate():
    samples = sg.generate_dataset(CATS, 60, seed=3, ambiguity=sg.AmbiguitySpec(0.0), size=(32, 32))
    assert all(s.k == 1 for s in samples)


def test_determinism_per_index():
    a = sg.generate_dataset(CATS, 5, seed=9, ambiguity=sg.AmbiguitySpec(0.5), size=(32, 32))
    b = sg.generate_dataset(CATS, 3, seed=9, ambiguity=sg.AmbiguitySpec(0.5), size=(32, 32), start_index=2)
    for x, y in zip(a[2:], b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.candidates.tobytes() == y.candidates.tobytes()
        assert x.id == y.id and x.category == y.category


def test_order_independence():
    fwd = sg.generate_dataset(CATS, 6, seed=4, size=(32, 32))
    rev = [sg.generate_dataset(CATS, 1, seed=4, size=(32, 32), start_index=i)[0] for i in reversed(range(6))]
    assert [s.image.tobytes() for s in fwd] == [s.image.tobytes() for s in reversed(rev)]


def test_sample_invariants():
    samples = sg.generate_dataset(CATS, 150, seed=5, ambiguity=sg.AmbiguitySpec(0.6, 3), size=(64, 64))
    for s in samples:
        assert s.image.shape == (64, 64, 3) and s.mask.shape == (64, 64)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert 0 <= s.designated < s.k
        assert np.array_equal(s.mask, s.candidates[s.designated])
        for c in s.candidates:
            assert ndimage.label(c, structure=FOUR_CONNECTED)[1] == 1
        for i in range(s.k):
            for j in range(i + 1, s.k):
                a, b = s.candidates[i] > 0, s.candidates[j] > 0
                assert (a & b).sum() / (a | b).sum() < 0.5


def test_images_are_8bit():
    s = sg.generate_dataset(CATS, 3, seed=6, size=(32, 32))[0]
    levels = s.image.astype(np.float64) * 255
    assert np.allclose(levels, np.round(levels), atol=1e-4)


def test_designated_uniform():
    samples = sg.generate_dataset(CATS, 1000, seed=7, ambiguity=sg.AmbiguitySpec(1.0, 2), size=(32, 32))
    assert all(s.k == 2 for s in samples)
    picks = sum(s.designated for s in samples)
    assert abs(picks - 500) <= 3 * np.sqrt(250)


def test_category_marginal_follows_weights():
    w = np.array([4.0, 1.0, 1.0, 2.0])
    cats = sg.make_categories(4)
    samples = sg.generate_dataset(cats, 800, seed=8, weights=w, size=(32, 32))
    counts = np.bincount([s.category for s in samples], minlength=4)
    assert stats.chisquare(counts, 800 * w / w.sum()).pvalue > 0.001


def test_ambiguous_objects_similar_size():
    samples = sg.generate_dataset(CATS, 200, seed=10, ambiguity=sg.AmbiguitySpec(1.0, 2), size=(64, 64))
    ratios = [max(a, b) / min(a, b) for a, b in (s.candidates.sum(axis=(1, 2)) for s in samples)]
    assert np.median(ratios) < 1.5


def test_modalities_shapes():
    s = sg.generate_dataset(CATS, 1, seed=11, size=(32, 32))[0]
    b = sg.synthesize_modalities(s, None, np.random.default_rng(0))
    assert b.semantic.shape == (1, 4, 32, 32)
    assert b.generative.shape == (1, 2, 8, 8)
    assert b.concept.shape == (1, 2, 32, 32)


def test_zero_corruption_concept_is_smoothed_gt():
    s = sg.generate_dataset(CATS, 1, seed=12, size=(32, 32))[0]
    spec = sg.ModalityCorruptionSpec.none()
    b = sg.synthesize_modalities(s, spec, np.random.default_rng(0))
    expected = ndimage.gaussian_filter(s.mask.astype(np.float64), spec.concept_blur)
    np.testing.assert_allclose(b.concept[0, 0], expected.astype(np.float32))
    np.testing.assert_allclose(b.concept[0, 1], (1 - expected).astype(np.float32), atol=1e-7)


def test_modalities_deterministic():
    samples = sg.generate_dataset(CATS, 4, seed=13, size=(32, 32))
    a = sg.bundle_for(samples, None, 3)
    b = sg.bundle_for(samples, None, 3)
    assert a.semantic.tobytes() == b.semantic.tobytes()
    assert a.generative.tobytes() == b.generative.tobytes()


def test_infeasible_placement_reports_scene():
    cat = sg.CategorySpec(id=0, shape="ring", texture="flat", size_range=(0.5, 0.5))
    with pytest.raises(sg.SceneGenerationError) as err:
        sg.generate_scene(cat, sg.AmbiguitySpec(1.0, 2), np.random.default_rng(0), (8, 8))
    assert err.value.scene["category"] == 0


def test_dataset_round_trip(tmp_path):
    samples = sg.generate_dataset(CATS, 6, seed=14, size=(32, 32))
    sg.write_dataset(tmp_path, samples)
    records, images, masks = sg.read_dataset(tmp_path)
    assert [r["id"] for r in records] == [s.id for s in samples]
    for s, img, m in zip(samples, images, masks):
        assert img.tobytes() == s.image.tobytes()
        assert np.array_equal(m, s.mask)
    assert set(records[0]) >= {"id", "category", "round", "seed", "K", "filter_status", "filter_reason"}
