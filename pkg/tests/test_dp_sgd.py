import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dpautogan.dp_sgd import (
    DpSgdConfig, clip, clip_rows, dp_sgd_step, noisy_average, noisy_gradient, partition, sample_batch,
)
from dpautogan.nn import make_optimizer

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def quadratic_grads(X):
    """Per-microbatch mean gradient of 0.5 * ||w - x||^2 for rows ``x`` of ``X``."""
    def fn(w):
        def grads(parts):
            return np.stack([w - X[p].mean(axis=0) for p in parts])
        return grads
    return fn


def test_non_private_full_batch_step_equals_plain_sgd():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 5))
    w = rng.standard_normal(5)
    cfg = DpSgdConfig(1.0, math.inf, 0.0, microbatch_size=40, learning_rate=0.3)
    new, state, ng = dp_sgd_step(40, quadratic_grads(X)(w), w, cfg, make_optimizer("sgd", 5), rng)
    plain = w - 0.3 * (w - X.mean(axis=0))
    assert np.max(np.abs(new - plain)) < 1e-10
    assert ng.k_hat == 1.0 and state.step_count == 1


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=finite),
       st.floats(1e-6, 1e3))
def test_clipped_rows_never_exceed_norm(grads, C):
    out = clip_rows(grads, C)
    assert np.all(np.linalg.norm(out, axis=1) <= C)
    norms = np.linalg.norm(grads, axis=1)
    small = norms <= C
    np.testing.assert_array_equal(out[small], grads[small])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=finite), st.floats(1e-6, 1e3))
def test_clip_preserves_direction(v, C):
    out = clip(v, C)
    assert np.linalg.norm(out) <= C
    n = np.linalg.norm(v)
    if n > C:
        np.testing.assert_allclose(out, v * (C / n), rtol=1e-11, atol=1e-300)


def test_clip_infinite_norm_is_identity():
    v = np.array([1e300, -3.0])
    np.testing.assert_array_equal(clip(v, math.inf), v)
    np.testing.assert_array_equal(clip_rows(v[None], math.inf), v[None])
    with pytest.raises(ValueError):
        clip(v, 0.0)


def test_noise_moments_match_gaussian():
    rng = np.random.default_rng(1)
    C, psi, k_hat = 2.0, 1.5, 8.0
    draws = np.stack([noisy_average(np.zeros((3, 4)), C, psi, k_hat, rng) for _ in range(100_000)])
    sd = C * psi / k_hat
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05 * sd)
    assert np.all(np.abs(draws.var(axis=0) / sd ** 2 - 1.0) < 0.05)


def test_noisy_average_without_noise_is_mean_of_clipped():
    g = np.array([[3.0, 4.0], [0.3, 0.4]])
    out = noisy_average(g, 1.0, 0.0, 2.0, np.random.default_rng(0))
    np.testing.assert_allclose(out, ([0.6, 0.8] + g[1]) / 2, rtol=1e-11)
    with pytest.raises(ValueError):
        noisy_average(g, 1.0, -1.0, 2.0, np.random.default_rng(0))


def test_poisson_batch_sizes_follow_binomial():
    rng = np.random.default_rng(2)
    m, q = 1000, 0.05
    sizes = np.array([len(sample_batch(m, q, rng)) for _ in range(4000)])
    mean_sd = math.sqrt(m * q * (1 - q) / len(sizes))
    assert abs(sizes.mean() - m * q) < 5 * mean_sd
    assert abs(sizes.var() / (m * q * (1 - q)) - 1) < 0.1
    b = sample_batch(m, q, rng)
    assert np.all(np.diff(b) > 0) and b.min() >= 0 and b.max() < m
    np.testing.assert_array_equal(sample_batch(7, 1.0, rng), np.arange(7))


@given(st.integers(0, 50), st.integers(1, 9))
def test_partition_drops_leftovers(n, r):
    parts = partition(np.arange(n), r)
    assert parts.shape == (n // r, r)
    np.testing.assert_array_equal(parts.ravel(), np.arange(n // r * r))


def test_step_skipped_when_batch_smaller_than_microbatch():
    rng = np.random.default_rng(3)
    cfg = DpSgdConfig(0.001, 1.0, 1.0, microbatch_size=50)
    w = np.ones(2)
    state = make_optimizer("sgd", 2)
    calls = []
    new, s, ng = dp_sgd_step(100, lambda p: calls.append(p) or np.zeros((len(p), 2)), w, cfg, state, rng)
    assert ng is None and new is w and s is state and not calls


def test_k_hat_is_expected_number_of_microbatches():
    cfg = DpSgdConfig(64 / 32561, 1.0, 1.0, microbatch_size=4)
    assert cfg.k_hat(32561) == pytest.approx(16.0)
    ng = noisy_gradient(32561, lambda p: np.zeros((len(p), 1)), cfg, np.random.default_rng(0))
    assert ng.k_hat == pytest.approx(16.0)


def test_private_sgd_converges_on_quadratic():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((2000, 3)) + np.array([1.0, -2.0, 0.5])
    cfg = DpSgdConfig(0.05, 1.0, 1.0, microbatch_size=1, learning_rate=0.05)
    w = np.zeros(3)
    state = make_optimizer("sgd", 3)
    for _ in range(1500):
        w, state, _ = dp_sgd_step(2000, quadratic_grads(X)(w), w, cfg, state, rng)
    assert np.linalg.norm(w - X.mean(axis=0)) < 0.1


@pytest.mark.parametrize("kw", [
    dict(sampling_rate=0.0, clip_norm=1.0, noise_multiplier=1.0),
    dict(sampling_rate=1.5, clip_norm=1.0, noise_multiplier=1.0),
    dict(sampling_rate=0.1, clip_norm=0.0, noise_multiplier=1.0),
    dict(sampling_rate=0.1, clip_norm=1.0, noise_multiplier=-1.0),
    dict(sampling_rate=0.1, clip_norm=1.0, noise_multiplier=1.0, microbatch_size=0),
    dict(sampling_rate=0.1, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.0),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DpSgdConfig(**kw)


def test_config_roundtrip_and_privacy_flag():
    cfg = DpSgdConfig(0.01, math.inf, 0.0, 2, 1e-3, {"kind": "adam"}, 100)
    d = cfg.to_dict()
    assert d["clip_norm"] == "inf"
    assert DpSgdConfig.from_dict(d) == cfg
    assert not cfg.is_private
    assert DpSgdConfig(0.01, 1.0, 1.1).is_private
