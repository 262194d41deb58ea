"""Synthetic generator, manifest I/O, and candidate-set construction tests."""

import json

import numpy as np
import pytest

from pllfer.datasets import (
    PartialSample,
    Sample,
    SynthSpec,
    build_candidate_sets_from_reference,
    corrupt_to_partial_labels,
    generate_synthetic_dataset,
    load_candidate_sets,
    load_image_folder,
    save_dataset,
)
from pllfer.errors import ConfigurationError, DataLoadError, SchemaError, ValidationError


def nearest_centroid_accuracy(train, test, num_classes):
    """Independent oracle: classify test pixels by nearest class-mean."""
    x = np.stack([s.image.ravel() for s in train])
    y = np.array([s.true_label for s in train])
    centroids = np.stack([x[y == k].mean(axis=0) for k in range(num_classes)])
    xt = np.stack([s.image.ravel() for s in test])
    yt = np.array([s.true_label for s in test])
    dists = ((xt[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((dists.argmin(axis=1) == yt).mean())


def _dummy_samples(n, num_classes=7, seed=0):
    rng = np.random.default_rng(seed)
    img = np.zeros((4, 4))
    return [
        Sample(image=img, true_label=int(rng.integers(num_classes)), id=i) for i in range(n)
    ]


def test_generation_is_deterministic_per_seed():
    spec = SynthSpec(num_classes=7, train_count=30, test_count=10, image_size=32,
                     noise_sigma=0.1, seed=1)
    a_train, a_test = generate_synthetic_dataset(spec)
    b_train, b_test = generate_synthetic_dataset(spec)
    for a, b in zip(a_train + a_test, b_train + b_test):
        assert a.id == b.id and a.true_label == b.true_label
        np.testing.assert_array_equal(a.image, b.image)


def test_noise_free_classes_are_centroid_separable():
    spec = SynthSpec(num_classes=7, train_count=350, test_count=140, image_size=64,
                     noise_sigma=0.0, seed=3)
    train, test = generate_synthetic_dataset(spec)
    assert nearest_centroid_accuracy(train, test, 7) == 1.0


def test_balanced_partition_is_exact():
    spec = SynthSpec(num_classes=7, train_count=700, test_count=7, image_size=32, seed=0)
    train, _ = generate_synthetic_dataset(spec)
    counts = np.bincount([s.true_label for s in train], minlength=7)
    assert list(counts) == [100] * 7


def test_imbalance_factor_shapes_train_counts():
    spec = SynthSpec(num_classes=4, train_count=400, test_count=4, image_size=32,
                     seed=0, imbalance=4.0)
    train, test = generate_synthetic_dataset(spec)
    counts = np.bincount([s.true_label for s in train], minlength=4)
    assert counts.sum() == 400 and counts[0] > counts[-1]
    # test split stays balanced
    assert list(np.bincount([s.true_label for s in test], minlength=4)) == [1] * 4


def test_intensities_stay_in_unit_interval():
    spec = SynthSpec(num_classes=7, train_count=20, test_count=5, image_size=32,
                     noise_sigma=0.8, seed=2)
    train, test = generate_synthetic_dataset(spec)
    for s in train + test:
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_invalid_spec_rejected():
    with pytest.raises(ConfigurationError):
        SynthSpec(num_classes=1)
    with pytest.raises(ConfigurationError):
        SynthSpec(noise_sigma=-0.1)
    with pytest.raises(ConfigurationError):
        SynthSpec(train_count=0)


# -- corruption ---------------------------------------------------------------


def test_zero_q_gives_singletons():
    partials = corrupt_to_partial_labels(_dummy_samples(50), q=0.0, seed=1, num_classes=7)
    for p in partials:
        assert p.candidate_count == 1
        assert p.candidates[p.sample.true_label] == 1


def test_truth_always_in_candidates():
    for q in (0.0, 0.3, 0.9):
        partials = corrupt_to_partial_labels(_dummy_samples(200), q=q, seed=5, num_classes=7)
        assert all(p.truth_in_candidates for p in partials)


def test_mean_candidate_count_matches_bernoulli_expectation():
    partials = corrupt_to_partial_labels(
        _dummy_samples(10_000), q=0.3, seed=7, num_classes=7
    )
    mean = np.mean([p.candidate_count for p in partials])
    assert abs(mean - 2.8) < 0.05


def test_candidate_count_converges_at_large_n():
    # 1 + q(K-1) within 2% at n = 1e5
    partials = corrupt_to_partial_labels(
        _dummy_samples(100_000), q=0.3, seed=11, num_classes=7
    )
    mean = np.mean([p.candidate_count for p in partials])
    assert abs(mean - 2.8) / 2.8 < 0.02


def test_corruption_is_pure_in_seed():
    samples = _dummy_samples(100)
    a = corrupt_to_partial_labels(samples, q=0.4, seed=3, num_classes=7)
    b = corrupt_to_partial_labels(samples, q=0.4, seed=3, num_classes=7)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.candidates, pb.candidates)


def test_bad_q_rejected():
    with pytest.raises(ConfigurationError):
        corrupt_to_partial_labels(_dummy_samples(3), q=1.0, seed=0, num_classes=7)
    with pytest.raises(ConfigurationError):
        corrupt_to_partial_labels(_dummy_samples(3), q=-0.1, seed=0, num_classes=7)


def test_unlabeled_sample_rejected():
    bad = [Sample(image=np.zeros((4, 4)), true_label=None, id=0)]
    with pytest.raises(ValidationError):
        corrupt_to_partial_labels(bad, q=0.1, seed=0, num_classes=7)


# -- reference-based construction --------------------------------------------


def test_confident_sample_gets_singleton():
    probs = np.array([[0.9, 0.05, 0.02, 0.01, 0.01, 0.005, 0.005]])
    out = build_candidate_sets_from_reference(_dummy_samples(1), probs, k=2,
                                              ambiguity_margin=0.2)
    assert list(np.flatnonzero(out[0].candidates)) == [0]


def test_ambiguous_sample_gets_top_k():
    probs = np.array([[0.45, 0.40, 0.15, 0, 0, 0, 0.0]])
    out = build_candidate_sets_from_reference(_dummy_samples(1), probs, k=2,
                                              ambiguity_margin=0.2)
    assert list(np.flatnonzero(out[0].candidates)) == [0, 1]


def test_k_equals_num_classes_gives_all_ones_for_ambiguous():
    probs = np.full((1, 7), 1 / 7)
    out = build_candidate_sets_from_reference(_dummy_samples(1), probs, k=7,
                                              ambiguity_margin=0.2)
    assert out[0].candidate_count == 7


def test_unnormalized_reference_rows_rejected():
    probs = np.array([[0.5, 0.4, 0.0, 0, 0, 0, 0.0]])
    with pytest.raises(ValidationError):
        build_candidate_sets_from_reference(_dummy_samples(1), probs, k=2,
                                            ambiguity_margin=0.2)


# -- manifest I/O --------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    spec = SynthSpec(num_classes=7, train_count=6, test_count=2, image_size=32,
                     noise_sigma=0.1, seed=9)
    train, _ = generate_synthetic_dataset(spec)
    partials = corrupt_to_partial_labels(train, q=0.5, seed=1, num_classes=7)
    save_dataset(train, tmp_path, candidates=[p.candidates for p in partials])

    loaded = load_image_folder(tmp_path, image_size=32, num_classes=7)
    assert len(loaded) == 6
    for orig, got in zip(train, loaded):
        assert got.true_label == orig.true_label
        assert np.abs(got.image - orig.image).max() <= 0.5 / 255 + 1e-12

    cands = load_candidate_sets(tmp_path / "manifest.jsonl", num_classes=7)
    for p, y in zip(partials, cands):
        np.testing.assert_array_equal(p.candidates, y)


def test_saved_files_are_byte_stable(tmp_path):
    spec = SynthSpec(num_classes=3, train_count=4, test_count=1, image_size=32, seed=4)
    train, _ = generate_synthetic_dataset(spec)
    save_dataset(train, tmp_path / "a")
    save_dataset(train, tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (
        tmp_path / "b/manifest.jsonl"
    ).read_bytes()
    assert (tmp_path / "a/images/000000.pgm").read_bytes() == (
        tmp_path / "b/images/000000.pgm"
    ).read_bytes()


def test_loader_preserves_manifest_order(tmp_path):
    (tmp_path / "images").mkdir()
    rows = []
    for i, label in enumerate([2, 0, 1]):
        img = np.full((8, 8), i / 4)
        from pllfer.datasets import _write_pgm

        _write_pgm(tmp_path / "images" / f"{i}.pgm", img)
        rows.append({"path": f"images/{i}.pgm", "label": label})
    with open(tmp_path / "manifest.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    loaded = load_image_folder(tmp_path, num_classes=3)
    assert [s.true_label for s in loaded] == [2, 0, 1]
    assert [s.id for s in loaded] == [0, 1, 2]


def test_label_out_of_range_is_schema_error(tmp_path):
    (tmp_path / "images").mkdir()
    from pllfer.datasets import _write_pgm

    _write_pgm(tmp_path / "images/x.pgm", np.zeros((8, 8)))
    (tmp_path / "manifest.jsonl").write_text(
        json.dumps({"path": "images/x.pgm", "label": 9}) + "\n"
    )
    with pytest.raises(SchemaError):
        load_image_folder(tmp_path, num_classes=7)


def test_empty_manifest_gives_empty_dataset(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert load_image_folder(tmp_path) == []


def test_missing_image_names_path(tmp_path):
    (tmp_path / "manifest.jsonl").write_text(
        json.dumps({"path": "images/missing.pgm", "label": 0}) + "\n"
    )
    with pytest.raises(DataLoadError, match="missing.pgm"):
        load_image_folder(tmp_path)


def test_missing_manifest_is_load_error(tmp_path):
    with pytest.raises(DataLoadError):
        load_image_folder(tmp_path / "nope")


def test_partial_sample_requires_nonempty_candidates():
    s = Sample(image=np.zeros((4, 4)), true_label=0, id=0)
    with pytest.raises(ValidationError):
        PartialSample(sample=s, candidates=np.zeros(7))
