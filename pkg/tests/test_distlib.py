import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncf import synth
from ncf.colorspace import rgb_to_lab
from ncf.distlib import (
    BIN_GRID,
    LIB_SLOTS,
    MIN_REGION_PIXELS,
    BadWeights,
    ColorDistribution,
    DistributionLibrary,
    EmptyCorpus,
    Palette,
    UnknownClass,
    bin_centers,
    bin_index_of,
    build_library,
    cluster_class_palettes,
    extract_palette,
    fuse_distributions,
    histogram_of,
    load_library,
    moments_of_distribution,
    palette_distance,
    raw_moment_arrays,
    sample_distribution,
    save_library,
)

N_BINS = int(np.prod(BIN_GRID))


def dist_with_bins(pairs):
    w = np.zeros(N_BINS)
    for idx, weight in pairs:
        w[idx] = weight
    return ColorDistribution(w.reshape(BIN_GRID))


def test_bin_index_corners():
    assert bin_index_of(np.array([0.0, -128.0, -128.0])) == 0
    assert bin_index_of(np.array([100.0, 127.0, 127.0])) == N_BINS - 1
    # out-of-box values clip into the edge bins
    assert bin_index_of(np.array([-5.0, -200.0, -200.0])) == 0
    assert bin_index_of(np.array([140.0, 300.0, 300.0])) == N_BINS - 1


def test_bin_centers_layout():
    centers = bin_centers()
    assert centers.shape == (N_BINS, 3)
    assert np.allclose(centers[0], [100.0 / 32, -128.0 + 255.0 / 32, -128.0 + 255.0 / 32])
    # centers invert bin_index_of
    assert np.array_equal(bin_index_of(centers), np.arange(N_BINS))


def test_histogram_is_normalized_and_localized():
    pix = np.tile([[50.0, 0.0, 0.0]], (10, 1))
    hist = histogram_of(pix)
    assert hist.weights.sum() == pytest.approx(1.0)
    idx = int(bin_index_of(np.array([50.0, 0.0, 0.0])))
    assert hist.weights.ravel()[idx] == 1.0
    with pytest.raises(ValueError):
        histogram_of(np.empty((0, 3)))


def test_distribution_validation():
    with pytest.raises(ValueError):
        ColorDistribution(np.zeros((4, 4, 4)))
    bad = np.zeros(BIN_GRID)
    bad[0, 0, 0] = 0.5
    with pytest.raises(ValueError):
        ColorDistribution(bad)
    neg = np.zeros(BIN_GRID)
    neg[0, 0, 0] = 1.5
    neg[0, 0, 1] = -0.5
    with pytest.raises(ValueError):
        ColorDistribution(neg)


def test_moments_of_two_point_distribution():
    centers = bin_centers()
    i, j = 100, 3000
    dist = dist_with_bins([(i, 0.5), (j, 0.5)])
    m = moments_of_distribution(dist)
    assert np.allclose(m.mean, 0.5 * (centers[i] + centers[j]))
    d = centers[i] - m.mean
    expect = np.outer(d, d)  # both points equidistant from the mean
    assert np.allclose(m.cov - 1e-4 * np.eye(3), expect, atol=1e-12)


def test_raw_moments_match_moments_of_distribution():
    rng = np.random.default_rng(0)
    dists = []
    for _ in range(5):
        w = rng.uniform(0.0, 1.0, N_BINS) * (rng.uniform(0.0, 1.0, N_BINS) < 0.01)
        w[rng.integers(N_BINS)] += 0.5
        dists.append(ColorDistribution((w / w.sum()).reshape(BIN_GRID)))
    means, seconds = raw_moment_arrays(dists)
    for k, d in enumerate(dists):
        m = moments_of_distribution(d)
        assert np.allclose(means[k], m.mean, atol=1e-12)
        cov = seconds[k] - np.outer(means[k], means[k]) + 1e-4 * np.eye(3)
        assert np.allclose(cov, m.cov, atol=1e-9)


def test_fuse_is_convex_combination():
    a = dist_with_bins([(0, 1.0)])
    b = dist_with_bins([(5, 1.0)])
    fused = fuse_distributions([(0.25, a), (0.75, b)])
    flat = fused.weights.ravel()
    assert flat[0] == pytest.approx(0.25)
    assert flat[5] == pytest.approx(0.75)


def test_fuse_rejects_bad_weights():
    a = dist_with_bins([(0, 1.0)])
    with pytest.raises(BadWeights):
        fuse_distributions([])
    with pytest.raises(BadWeights):
        fuse_distributions([(0.5, a), (0.6, a)])
    with pytest.raises(BadWeights):
        fuse_distributions([(-0.1, a), (1.1, a)])


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5))
@settings(deadline=None, max_examples=30)
def test_fuse_property(raw):
    weights = np.array(raw) / np.sum(raw)
    rng = np.random.default_rng(42)
    dists = [dist_with_bins([(int(rng.integers(N_BINS)), 1.0)]) for _ in weights]
    fused = fuse_distributions(list(zip(weights, dists)))
    manual = sum(w * d.weights for w, d in zip(weights, dists))
    assert np.allclose(fused.weights, manual, atol=1e-12)
    assert fused.weights.sum() == pytest.approx(1.0)


def test_extract_palette_recovers_distinct_colors():
    colors = np.array([[10.0, 0.0, 0.0], [50.0, 20.0, -30.0], [90.0, -40.0, 60.0]])
    pixels = np.repeat(colors, [60, 30, 10], axis=0)
    pal = extract_palette(pixels, palette_size=5, seed=1)
    assert pal.colors.shape[0] == 3  # clamped to distinct count
    assert pal.proportions.sum() == pytest.approx(1.0)
    order = np.argsort(pal.colors[:, 0])
    assert np.allclose(pal.colors[order], colors, atol=1e-9)
    assert np.allclose(pal.proportions[order], [0.6, 0.3, 0.1])


def test_extract_palette_deterministic():
    rng = np.random.default_rng(9)
    pixels = rng.normal(50.0, 15.0, (400, 3))
    a = extract_palette(pixels, seed=[1, 2])
    b = extract_palette(pixels, seed=[1, 2])
    assert np.array_equal(a.colors, b.colors)
    with pytest.raises(ValueError):
        extract_palette(np.empty((0, 3)))


def test_palette_distance_basics():
    pal_a = Palette(np.array([[0.0, 0.0, 0.0]]), np.array([1.0]))
    pal_b = Palette(np.array([[3.0, 4.0, 0.0]]), np.array([1.0]))
    assert palette_distance(pal_a, pal_a) == 0.0
    assert palette_distance(pal_a, pal_b) == pytest.approx(5.0)
    assert palette_distance(pal_b, pal_a) == pytest.approx(5.0)


def test_cluster_single_member_repeats():
    dist = dist_with_bins([(7, 1.0)])
    pal = Palette(np.array([[1.0, 2.0, 3.0]]), np.array([1.0]))
    reps = cluster_class_palettes([(pal, dist)], seed=0)
    assert len(reps) == LIB_SLOTS
    assert all(r is dist for r in reps)


def test_library_slot_count_enforced():
    dist = dist_with_bins([(0, 1.0)])
    with pytest.raises(ValueError):
        DistributionLibrary(classes={1: [dist] * (LIB_SLOTS - 1)})


def test_sample_distribution_slots_and_unknown():
    dist = dist_with_bins([(0, 1.0)])
    lib = DistributionLibrary(classes={2: [dist] * LIB_SLOTS})
    rng = np.random.default_rng(0)
    slots = {sample_distribution(lib, 2, rng)[0] for _ in range(200)}
    assert min(slots) >= 1 and max(slots) <= LIB_SLOTS
    with pytest.raises(UnknownClass):
        sample_distribution(lib, 9, rng)


def test_build_library_keys_by_mask_ids(small_dataset, color_library):
    labels = {s.label for s in small_dataset}
    assert set(color_library.classes) == {0} | {1 + c for c in labels}
    for cid, dists in color_library.classes.items():
        assert len(dists) == LIB_SLOTS
        for d in dists:
            assert d.weights.sum() == pytest.approx(1.0)


def test_build_library_min_region_filter():
    rng = np.random.default_rng(1)
    lab = rng.uniform(20.0, 80.0, (16, 16, 3))
    mask = np.zeros((16, 16), dtype=np.int64)
    mask[:2, : MIN_REGION_PIXELS // 2 - 1] = 7  # below the pixel floor
    lib = build_library([(lab, mask)], seed=0)
    assert 7 not in lib.classes
    assert 0 in lib.classes


def test_build_library_empty_corpus():
    lab = np.zeros((4, 4, 3))
    mask = np.arange(16).reshape(4, 4)  # every region is a single pixel
    with pytest.raises(EmptyCorpus):
        build_library([(lab, mask)], seed=0)


def test_build_library_deterministic():
    ds = synth.generate(3, 3, seed=21)
    corpus = [(rgb_to_lab(s.image), s.mask) for s in ds]
    lib_a = build_library(corpus, seed=4)
    lib_b = build_library(corpus, seed=4)
    for cid in lib_a.classes:
        for da, db in zip(lib_a.classes[cid], lib_b.classes[cid]):
            assert np.array_equal(da.weights, db.weights)


def test_save_load_round_trip(tmp_path, color_library):
    path = tmp_path / "lib.json"
    save_library(color_library, path)
    loaded = load_library(path)
    assert set(loaded.classes) == set(color_library.classes)
    assert loaded.names == color_library.names
    for cid in color_library.classes:
        for da, db in zip(color_library.classes[cid], loaded.classes[cid]):
            assert np.array_equal(da.weights, db.weights)


def test_load_rejects_bad_header(tmp_path, color_library):
    path = tmp_path / "lib.json"
    save_library(color_library, path)
    doc = json.loads(path.read_text())

    doc_bad = dict(doc, version=99)
    (tmp_path / "v.json").write_text(json.dumps(doc_bad))
    with pytest.raises(ValueError, match="version"):
        load_library(tmp_path / "v.json")

    doc_bad = dict(doc, bin_grid=[8, 8, 8])
    (tmp_path / "g.json").write_text(json.dumps(doc_bad))
    with pytest.raises(ValueError, match="grid"):
        load_library(tmp_path / "g.json")

    doc_bad = dict(doc, num_classes=doc["num_classes"] + 1)
    (tmp_path / "n.json").write_text(json.dumps(doc_bad))
    with pytest.raises(ValueError, match="count"):
        load_library(tmp_path / "n.json")
