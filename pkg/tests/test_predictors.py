import math

import numpy as np
import pytest
from PIL import Image

from changecrf.predictors import (
    N_IMAGE_FEATURES,
    N_PIXEL_FEATURES,
    LogisticModel,
    TauReferenceSet,
    estimate_tau_knn,
    fit_classifier,
    fit_logistic,
    fit_pixel_unary,
    image_features,
    knn_indices,
    load_unary_from_file,
    pixel_features,
    predict_label,
    predict_unary,
    probability_to_unary,
)
from changecrf.synth import SynthConfig, generate
from changecrf.types import ImagePair, color_difference

from conftest import random_pair


def _constant_model(p, n_features=N_PIXEL_FEATURES):
    logit = math.log(p / (1 - p))
    return LogisticModel(np.zeros(n_features), logit, np.zeros(n_features), np.ones(n_features), 0, 0.0)


def test_pixel_features_identical_images(rng):
    a = rng.random((6, 7, 3))
    feats = pixel_features(ImagePair(a, a))
    assert feats.shape == (42, N_PIXEL_FEATURES)
    np.testing.assert_array_equal(feats, 0.0)


def test_pixel_features_single_changed_pixel():
    a = np.full((11, 11, 3), 0.5)
    b = a.copy()
    b[5, 5] = [0.9, 0.1, 0.5]
    feats = pixel_features(ImagePair(a, b)).reshape(11, 11, N_PIXEL_FEATURES)
    delta, local = feats[..., 3], feats[..., 4]
    assert delta[5, 5] > 0
    assert np.count_nonzero(delta) == 1
    near = np.zeros((11, 11), bool)
    near[3:8, 3:8] = True
    assert np.all(local[near] > 0)
    np.testing.assert_array_equal(local[~near], 0.0)


def test_pixel_delta_column_matches_color_difference(rng):
    pair = random_pair(rng, 5, 6)
    delta = pixel_features(pair)[:, 3]
    want = [color_difference(pair, j) for j in range(30)]
    np.testing.assert_allclose(delta, want, rtol=1e-14)


def test_border_windows_are_truncated():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[0, 0] = 1.0
    local = pixel_features(ImagePair(a, b))[:, 4].reshape(8, 8)
    # the corner window holds 3 x 3 real pixels
    np.testing.assert_allclose(local[0, 0], math.sqrt(3) / 9)


def test_pixel_features_translation_consistent(rng):
    base_a = rng.random((20, 20, 3))
    base_b = rng.random((20, 20, 3))
    f0 = pixel_features(ImagePair(base_a, base_b)).reshape(20, 20, -1)
    f1 = pixel_features(ImagePair(np.roll(base_a, (2, 3), (0, 1)), np.roll(base_b, (2, 3), (0, 1)))).reshape(20, 20, -1)
    # interior pixels far enough from the wrapped seam
    np.testing.assert_allclose(f1[8:16, 9:17, :6], f0[6:14, 6:14, :6], atol=1e-12)


def test_image_features_layout(rng):
    a = rng.random((16, 16, 3))
    b = a.copy()
    b[:4, :4] = 1.0 - a[:4, :4]
    pair = ImagePair(a, b)
    f = image_features(pair)
    assert f.shape == (N_IMAGE_FEATURES,)
    delta = np.sqrt(((a - b) ** 2).sum(axis=2))
    np.testing.assert_allclose(f[0], delta[:4, :4].mean())
    np.testing.assert_allclose(f[16], delta[:4, :4].max())
    np.testing.assert_array_equal(f[1:16], 0.0)
    np.testing.assert_allclose(f[32:40].sum(), 1.0)
    np.testing.assert_allclose(f[40:], np.abs(a - b).reshape(-1, 3).mean(axis=0))


def test_image_features_small_images(rng):
    f = image_features(random_pair(rng, 3, 2))
    assert f.shape == (N_IMAGE_FEATURES,)
    assert np.all(np.isfinite(f))


def test_fit_separable_pixels(rng):
    delta = rng.random(2000)
    x = np.column_stack([delta, rng.normal(size=2000)])
    y = (delta > 0.5).astype(int)
    model = fit_logistic(x, y)
    acc = np.mean((model.predict_proba(x) >= 0.5) == y)
    assert acc >= 0.99
    assert 1 <= model.epochs <= 500


def test_fit_all_background_warns(rng):
    feats = [rng.random((30, N_PIXEL_FEATURES))]
    with pytest.warns(RuntimeWarning, match="single class"):
        model = fit_pixel_unary(feats, [np.zeros(30)])
    assert model.single_class
    assert np.all(model.predict_proba(feats[0]) < 0.5)


def test_fit_deterministic_under_duplication_and_order(rng):
    x = rng.normal(size=(100, 4))
    y = (x[:, 0] + 0.3 * rng.normal(size=100) > 0).astype(int)
    m1 = fit_logistic(x, y)
    m2 = fit_logistic(x, y)
    np.testing.assert_array_equal(m1.weights, m2.weights)
    dup = fit_logistic(np.vstack([x, x]), np.concatenate([y, y]))
    np.testing.assert_allclose(dup.weights, m1.weights, rtol=1e-9, atol=1e-12)
    perm = rng.permutation(100)
    shuffled = fit_classifier(list(x[perm]), list(y[perm]))
    np.testing.assert_allclose(shuffled.weights, m1.weights, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(shuffled.bias, m1.bias, rtol=1e-9, atol=1e-12)


def test_fit_classifier_separable(rng):
    x = rng.normal(size=(80, N_IMAGE_FEATURES))
    y = (x[:, 3] > 0).astype(int)
    model = fit_classifier(list(x), list(y))
    assert np.mean((model.predict_proba(x) >= 0.5) == y) >= 0.99


def test_fit_classifier_all_change(rng):
    x = rng.normal(size=(10, 5))
    with pytest.warns(RuntimeWarning):
        model = fit_classifier(list(x), [1] * 10)
    assert np.all(model.predict_proba(x) >= 0.5)


@pytest.mark.parametrize(
    "x, y",
    [
        (np.zeros((3, 2)), np.array([0, 1])),
        (np.zeros((0, 2)), np.zeros(0)),
        (np.zeros((2, 2)), np.array([0, 2])),
    ],
)
def test_fit_validation(x, y):
    with pytest.raises(ValueError):
        fit_logistic(x, y)


def test_fit_list_mismatch():
    with pytest.raises(ValueError):
        fit_pixel_unary([np.zeros((3, 7))], [])
    with pytest.raises(ValueError):
        fit_classifier([], [])


def test_model_round_trip(rng):
    x = rng.normal(size=(50, 3))
    model = fit_logistic(x, (x[:, 1] > 0).astype(int))
    back = LogisticModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.decision(x), model.decision(x))
    assert back.epochs == model.epochs


def test_probability_to_unary_values():
    u = probability_to_unary(np.array([0.5, 0.9, 0.0, 1.0]))
    np.testing.assert_allclose(u[0], [math.log(2), math.log(2)], rtol=1e-15)
    np.testing.assert_allclose(u[1], [2.302585092994046, 0.10536051565782628], rtol=1e-12)
    assert np.all(np.isfinite(u))
    np.testing.assert_allclose(u[2, 1], -math.log(1e-6))


def test_unary_properties(rng):
    p = np.sort(rng.random(200))
    u = probability_to_unary(p)
    assert np.all(np.diff(u[:, 1]) <= 0)
    assert np.all(u.sum(axis=1) >= 2 * math.log(2) - 1e-15)
    half = probability_to_unary(np.array([0.5])).sum()
    np.testing.assert_allclose(half, 2 * math.log(2), rtol=1e-15)


def test_predict_unary_shape(rng):
    pair = random_pair(rng, 4, 6)
    u = predict_unary(_constant_model(0.9), pair)
    assert u.shape == (4, 6, 2)
    np.testing.assert_allclose(u[..., 1], -math.log(0.9), rtol=1e-12)


def test_predict_label_boundary(rng):
    pair = random_pair(rng)
    assert predict_label(_constant_model(0.5, N_IMAGE_FEATURES), pair) == (1, 0.5)
    y, score = predict_label(_constant_model(0.3, N_IMAGE_FEATURES), pair)
    assert y == 0 and score == pytest.approx(0.3)


def test_predict_label_on_synthetic_corpus():
    corpus = generate(SynthConfig(n_pairs=60, size=32, seed=5))
    pairs = [ImagePair(p.image_a, p.image_b) for p in corpus]
    model = fit_classifier([image_features(p) for p in pairs], [p.y for p in corpus])
    probe = generate(SynthConfig(n_pairs=20, size=32, seed=6))
    same = [p for p in probe if p.y == 0][0]
    changed = [p for p in probe if p.y == 1][0]
    assert predict_label(model, ImagePair(same.image_a, same.image_a))[0] == 0
    assert predict_label(model, ImagePair(changed.image_a, changed.image_b))[0] == 1


def test_coarse_map_upsampled(tmp_path):
    path = tmp_path / "coarse.npy"
    np.save(path, np.full((32, 32), 0.5))
    u = load_unary_from_file(path, (512, 512))
    assert u.shape == (512, 512, 2)
    np.testing.assert_allclose(u, math.log(2), rtol=1e-15)


def test_coarse_map_bilinear(tmp_path):
    path = tmp_path / "ramp.npy"
    np.save(path, np.array([[0.2, 0.6]]))
    p = np.exp(-load_unary_from_file(path, (2, 4))[..., 1])
    # pixel centres at 0.25 and 0.75 of a coarse cell, edges replicated
    np.testing.assert_allclose(p[0], [0.2, 0.3, 0.5, 0.6], rtol=1e-12)


def test_full_resolution_map_exact(tmp_path, rng):
    prob = rng.random((9, 7)) * 0.98 + 0.01
    np.save(tmp_path / "p.npy", prob)
    u = load_unary_from_file(tmp_path / "p.npy", (9, 7))
    np.testing.assert_allclose(u[..., 1], -np.log(prob), rtol=1e-14)
    np.testing.assert_allclose(u[..., 0], -np.log1p(-prob), rtol=1e-14)


def test_png_map(tmp_path):
    Image.fromarray(np.array([[0, 255], [51, 204]], dtype=np.uint8)).save(tmp_path / "p.png")
    u = load_unary_from_file(tmp_path / "p.png")
    np.testing.assert_allclose(np.exp(-u[..., 1]), [[1e-6, 1 - 1e-6], [0.2, 0.8]], rtol=1e-12)


@pytest.mark.parametrize("content", [np.array([[0.3, 1.2]]), np.array([[np.nan, 0.1]]), np.zeros((2, 2, 2))])
def test_bad_map_values(tmp_path, content):
    np.save(tmp_path / "bad.npy", content)
    with pytest.raises(ValueError):
        load_unary_from_file(tmp_path / "bad.npy")


def test_unparseable_map(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="parse"):
        load_unary_from_file(tmp_path / "junk.png")


def test_map_must_divide_target(tmp_path):
    np.save(tmp_path / "p.npy", np.full((3, 3), 0.5))
    with pytest.raises(ValueError, match="divide"):
        load_unary_from_file(tmp_path / "p.npy", (8, 8))


def test_knn_self_match(rng):
    refs = TauReferenceSet()
    feats = rng.normal(size=(10, 5))
    for i, f in enumerate(feats):
        refs.add(f, 0.05 * i)
    assert estimate_tau_knn(feats[7], refs, k=1) == pytest.approx(0.35)


def test_knn_matches_sort_oracle(rng):
    refs = TauReferenceSet()
    feats = rng.normal(size=(20, 6))
    props = rng.random(20)
    for f, p in zip(feats, props):
        refs.add(f, p)
    q = rng.normal(size=6)
    order = sorted(range(20), key=lambda i: float(np.sum((feats[i] - q) ** 2)))[:5]
    np.testing.assert_array_equal(knn_indices(q, refs, 5), order)
    want = min(max(np.mean(props[order]), 0.01), 0.99)
    assert estimate_tau_knn(q, refs, 5) == pytest.approx(want, abs=1e-15)


def test_knn_ties_keep_insertion_order():
    refs = TauReferenceSet()
    for p in (0.1, 0.2, 0.3, 0.4):
        refs.add(np.ones(2), p)
    np.testing.assert_array_equal(knn_indices(np.zeros(2), refs, 2), [0, 1])


def test_knn_clamped_and_capped():
    refs = TauReferenceSet()
    refs.add(np.zeros(3), 0.0)
    refs.add(np.ones(3), 0.0)
    assert estimate_tau_knn(np.zeros(3), refs, k=6) == 0.01
    with pytest.raises(ValueError):
        estimate_tau_knn(np.zeros(3), TauReferenceSet(), k=6)
    with pytest.raises(ValueError):
        refs.add(np.zeros(3), 1.5)


def test_knn_within_neighbour_range(rng):
    refs = TauReferenceSet()
    for f in rng.normal(size=(30, 4)):
        refs.add(f, float(rng.uniform(0.1, 0.9)))
    for q in rng.normal(size=(10, 4)):
        idx = knn_indices(q, refs, 6)
        props = np.asarray(refs.proportions)[idx]
        assert props.min() <= estimate_tau_knn(q, refs) <= props.max()


def test_reference_set_round_trip(rng):
    refs = TauReferenceSet()
    refs.add(rng.normal(size=4), 0.3)
    back = TauReferenceSet.from_dict(refs.to_dict())
    assert len(back) == 1
    np.testing.assert_array_equal(back.features[0], refs.features[0])
