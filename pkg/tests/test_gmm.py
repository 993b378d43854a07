import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stedfv.data import DatasetManifest, ManifestEntry, VideoDescriptorSet, VideoHeader, write_video_file
from stedfv.gmm import (
    GmmModel,
    GmmTrainConfig,
    _floored_weights,
    average_log_likelihood,
    gmm_fit_em,
    gmm_fit_em_trace,
    gmm_posteriors,
    kmeans_init,
    load_gmm,
    resolve_variance_floor,
    sample_training_points,
    save_gmm,
)


def _pool_manifest(tmp_path, sizes, dim=2):
    entries, value = [], 0
    for i, m in enumerate(sizes):
        phi = np.arange(value, value + m * dim, dtype=np.float32).reshape(m, dim)
        value += m * dim
        video = VideoDescriptorSet(VideoHeader(8, 8, 4, dim), np.ones((m, 3)), phi)
        write_video_file(video, tmp_path / f"v{i}.sted")
        entries.append(ManifestEntry(f"v{i}", f"v{i}.sted", "a", "g"))
    return DatasetManifest(tuple(entries), ("a",), tmp_path)


def test_sample_exhaustive_is_permutation(tmp_path):
    m = _pool_manifest(tmp_path, [4, 6])
    pts = sample_training_points(m, 10, seed=3)
    pool = np.arange(20, dtype=np.float64).reshape(10, 2)
    assert sorted(map(tuple, pts)) == sorted(map(tuple, pool))


def test_sample_with_replacement_fallback(tmp_path):
    m = _pool_manifest(tmp_path, [5])
    pts = sample_training_points(m, 20, seed=0)
    pool = {tuple(r) for r in np.arange(10, dtype=np.float64).reshape(5, 2)}
    assert pts.shape == (20, 2)
    assert all(tuple(r) in pool for r in pts)


def test_sample_deterministic_and_locations(tmp_path):
    m = _pool_manifest(tmp_path, [7, 3])
    a = sample_training_points(m, 5, seed=9)
    b = sample_training_points(m, 5, seed=9)
    np.testing.assert_array_equal(a, b)
    phi, uvw = sample_training_points(m, 5, seed=9, with_locations=True)
    np.testing.assert_array_equal(phi, a)
    np.testing.assert_allclose(uvw, [[0.125, 0.125, 1 / 3]] * 5)


def test_sample_empty_pool(tmp_path):
    m = _pool_manifest(tmp_path, [0])
    with pytest.raises(ValueError):
        sample_training_points(m, 5, seed=0)


def test_kmeans_single_cluster():
    model = kmeans_init(np.array([[0.0], [2.0]]), 1, seed=0)
    assert model.means[0, 0] == 1.0
    assert model.variances[0, 0] == 1.0
    assert model.weights[0] == 1.0


def test_kmeans_k_equals_distinct_points():
    pts = np.array([[0.0, 0.0], [5.0, 1.0], [0.0, 0.0], [-3.0, 4.0], [5.0, 1.0]])
    floor = 1e-3
    model = kmeans_init(pts, 3, seed=1, variance_floor=floor)
    assert sorted(map(tuple, model.means)) == sorted({tuple(p) for p in pts})
    np.testing.assert_array_equal(model.variances, floor)


def test_kmeans_deterministic_and_too_few_points(rng):
    pts = rng.standard_normal((100, 3))
    a, b = kmeans_init(pts, 5, seed=4), kmeans_init(pts, 5, seed=4)
    assert a.means.tobytes() == b.means.tobytes()
    with pytest.raises(ValueError):
        kmeans_init(np.zeros((10, 2)), 2, seed=0)


def test_posterior_examples():
    one = GmmModel(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)))
    assert gmm_posteriors(one, [3.7])[0] == 1.0
    two = GmmModel(np.array([0.5, 0.5]), np.array([[1.0], [-1.0]]), np.ones((2, 1)))
    np.testing.assert_allclose(gmm_posteriors(two, [0.0]), [0.5, 0.5], atol=1e-15)
    # ratio of the two densities at x=1 is exp(2)
    expected = 1.0 / (1.0 + math.exp(-2.0))
    assert gmm_posteriors(two, [1.0])[0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.8808, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
def test_posteriors_sum_to_one(seed, offset):
    r = np.random.default_rng(seed)
    K, d = int(r.integers(1, 6)), int(r.integers(1, 5))
    w = r.uniform(0.1, 1, K)
    model = GmmModel(w / w.sum(), r.standard_normal((K, d)), r.uniform(0.01, 2, (K, d)))
    post = gmm_posteriors(model, r.standard_normal((10, d)) * 50 + offset)
    assert np.isfinite(post).all()
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)


def test_em_single_component_closed_form(rng):
    x = rng.standard_normal((500, 3)) * [1, 2, 3] + [5, -1, 0]
    model, trace = gmm_fit_em_trace(x, GmmTrainConfig(K=1, seed=0))
    np.testing.assert_allclose(model.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(model.variances[0], x.var(axis=0), rtol=1e-10)
    assert model.weights[0] == 1.0
    assert len(trace) <= 3


def test_em_recovers_separated_components(rng):
    x = np.concatenate([rng.normal(-10, 1, 2000), rng.normal(10, 1, 2000)])[:, None]
    model = gmm_fit_em(x, GmmTrainConfig(K=2, seed=7))
    means = np.sort(model.means[:, 0])
    assert abs(means[0] + 10) < 0.5 and abs(means[1] - 10) < 0.5
    np.testing.assert_allclose(np.sort(model.weights), [0.5, 0.5], atol=0.05)


def test_em_monotone_floors_and_determinism(rng):
    x = np.concatenate([rng.standard_normal((300, 2)) + c for c in ([0, 0], [4, 0], [0, 4])])
    cfg = GmmTrainConfig(K=6, seed=2, weight_floor=1e-3)
    model, trace = gmm_fit_em_trace(x, cfg)
    assert (np.diff(trace) >= -1e-9).all()
    assert model.variances.min() >= resolve_variance_floor(x)
    assert model.weights.min() >= cfg.weight_floor
    assert abs(model.weights.sum() - 1) < 1e-12
    again = gmm_fit_em(x, cfg)
    assert again.means.tobytes() == model.means.tobytes()
    assert len(trace) < cfg.max_iter
    assert trace[-1] == pytest.approx(average_log_likelihood(model, x), rel=1e-10)


def test_em_thread_count_invariance(rng):
    x = rng.standard_normal((9000, 3))
    cfg = GmmTrainConfig(K=4, seed=1, max_iter=15)
    a = gmm_fit_em(x, cfg, threads=1)
    b = gmm_fit_em(x, cfg, threads=3)
    assert a.means.tobytes() == b.means.tobytes()
    assert a.variances.tobytes() == b.variances.tobytes()
    assert a.weights.tobytes() == b.weights.tobytes()


def test_em_non_finite_input():
    x = np.array([[0.0], [1.0], [np.inf]])
    with pytest.raises((FloatingPointError, ValueError)):
        gmm_fit_em(x, GmmTrainConfig(K=1))


def test_floored_weights_is_constrained_optimum():
    counts = np.array([100.0, 0.0, 0.001, 50.0])
    w = _floored_weights(counts, 0.01)
    assert w.min() >= 0.01
    assert abs(w.sum() - 1) < 1e-12
    np.testing.assert_allclose(w[[1, 2]], 0.01)
    np.testing.assert_allclose(w[0] / w[3], 2.0)


def test_config_validation():
    with pytest.raises(ValueError):
        GmmTrainConfig(K=0)
    with pytest.raises(ValueError):
        GmmTrainConfig(rel_tol=1.5)
    with pytest.raises(ValueError):
        GmmTrainConfig(K=4, weight_floor=0.5)
    assert GmmTrainConfig().sample_count == 256000 and GmmTrainConfig().K == 256


def test_gmm_file_round_trip(tmp_path, rng):
    model = gmm_fit_em(rng.standard_normal((200, 2)), GmmTrainConfig(K=3, seed=0))
    path = tmp_path / "g.gmm"
    save_gmm(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"GMM1" and len(raw) == 16 + 4 * (3 + 2 * 3 * 2)
    back = load_gmm(path)
    np.testing.assert_array_equal(back.means, model.means.astype(np.float32))
    save_gmm(back, tmp_path / "g2.gmm")
    assert (tmp_path / "g2.gmm").read_bytes() == raw
