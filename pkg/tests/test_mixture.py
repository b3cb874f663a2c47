import itertools
import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compound_norm.mixture import (
    DegeneratePriorError,
    MixtureState,
    TempStats,
    accumulate_em,
    accumulate_split,
    em_temporary_stats,
    init_mixture,
    log_pdf,
    responsibilities,
)
from compound_norm.numerics import Rng, colwise_mean_var


def mp_log_pdf(x, mu, var):
    total = mpmath.mpf(0)
    for xd, md, vd in zip(x, mu, var):
        xd, md, vd = mpmath.mpf(xd), mpmath.mpf(md), mpmath.mpf(vd)
        total += (xd - md) ** 2 / vd + mpmath.log(2 * mpmath.pi * vd)
    return -total / 2


def mp_weighted_moments(x, w):
    """Weighted mean and variance of each row of x under weight vector w."""
    w = [mpmath.mpf(v) for v in w]
    s = mpmath.fsum(w)
    means, variances = [], []
    for row in x:
        vals = [mpmath.mpf(v) for v in row]
        m = mpmath.fsum(wi * vi for wi, vi in zip(w, vals)) / s
        means.append(float(m))
        variances.append(float(mpmath.fsum(wi * (vi - m) ** 2 for wi, vi in zip(w, vals)) / s))
    return np.array(means), np.array(variances)


# init_mixture

def test_init_single_component_is_plain_bn():
    s = init_mixture(1, 5)
    np.testing.assert_array_equal(s.tau, [1.0])
    np.testing.assert_array_equal(s.mu, 0.0)
    np.testing.assert_array_equal(s.var, 1.0)


def test_init_identical_components():
    s = init_mixture(4, 8)
    np.testing.assert_array_equal(s.tau, 0.25)
    assert np.all(s.mu == s.mu[0]) and np.all(s.var == 1.0)


def test_init_jitter_reproducible():
    a = init_mixture(4, 6, Rng(3), 0.1)
    b = init_mixture(4, 6, Rng(3), 0.1)
    np.testing.assert_array_equal(a.mu, b.mu)
    assert np.all(np.abs(a.mu) <= 0.1)
    np.testing.assert_array_equal(a.mu, Rng(3).uniform(-0.1, 0.1, size=(4, 6)))


def test_init_rejects_bad_arguments():
    with pytest.raises(ValueError):
        init_mixture(0, 3)
    with pytest.raises(ValueError):
        init_mixture(2, 3, Rng(0), -1.0)


# log_pdf

def test_log_pdf_standard_normal_at_zero():
    assert log_pdf([0.0], [0.0], [1.0], 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_pdf([0.0], [0.0], [1.0], 0.0) == pytest.approx(-0.918939, abs=1e-6)


def test_log_pdf_two_dims_at_mean():
    assert log_pdf([3.0, -1.0], [3.0, -1.0], [1.0, 1.0], 0.0) == pytest.approx(-1.837877, abs=1e-6)


def test_log_pdf_matches_direct_evaluation():
    expected = float(mp_log_pdf([1, 2], [0, 0], [1, 4]))
    assert log_pdf([1.0, 2.0], [0.0, 0.0], [1.0, 4.0], 0.0) == pytest.approx(expected, abs=1e-14)


def test_log_pdf_applies_eps_to_variance():
    expected = float(mp_log_pdf([1.0], [0.0], [0.5 + 0.25]))
    assert log_pdf([1.0], [0.0], [0.5], 0.25) == pytest.approx(expected, abs=1e-14)


def test_log_pdf_rejects_non_finite():
    with pytest.raises(ValueError):
        log_pdf([np.nan], [0.0], [1.0], 0.0)


# responsibilities

def test_responsibilities_single_component(rng):
    s = init_mixture(1, 3)
    np.testing.assert_array_equal(responsibilities(rng.normal(size=(3, 7)), s), 1.0)


def test_responsibilities_identical_components(rng):
    s = init_mixture(2, 3)
    np.testing.assert_allclose(responsibilities(rng.normal(size=(3, 7)), s), 0.5, atol=1e-15)


def test_responsibilities_two_component_example():
    s = MixtureState([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]], eps=0.0)
    w = responsibilities([[0.0, 2.0]], s)
    np.testing.assert_allclose(w[0], [0.5, 0.5], atol=1e-15)
    a = mpmath.exp(mp_log_pdf([2], [-1], [1]))
    b = mpmath.exp(mp_log_pdf([2], [1], [1]))
    np.testing.assert_allclose(w[1], [float(a / (a + b)), float(b / (a + b))], rtol=1e-12)


def test_responsibilities_survive_underflow():
    # raw densities underflow to zero at this distance, log-domain does not
    s = MixtureState([0.5, 0.5], np.zeros((2, 200)), np.ones((2, 200)), eps=0.0)
    s.mu[1] += 0.1
    w = responsibilities(np.full((200, 1), 40.0), s)
    assert np.all(np.isfinite(w)) and w[0, 1] == pytest.approx(1.0)


def test_responsibilities_degenerate_prior():
    s = init_mixture(2, 1)
    s.tau[:] = 0.0
    with pytest.raises(DegeneratePriorError):
        responsibilities([[0.0]], s)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 5), d=st.integers(1, 6), factor=st.floats(0.01, 100.0))
def test_responsibility_rows_and_prior_scale_invariance(seed, m, d, factor):
    r = Rng(seed)
    tau = r.uniform(0.05, 1.0, size=m)
    s = MixtureState(tau / tau.sum(), r.normal(size=(m, d)), r.uniform(0.2, 3.0, size=(m, d)))
    x = r.normal(0.0, 3.0, size=(d, 20))
    w = responsibilities(x, s)
    assert np.all(np.abs(w.sum(axis=1) - 1.0) < 1e-9)
    assert np.all((w >= 0) & (w <= 1))
    scaled = s.copy()
    scaled.tau = scaled.tau * factor
    scaled.tau /= scaled.tau.sum()
    assert np.max(np.abs(responsibilities(x, scaled) - w)) <= 1e-12


# em_temporary_stats

def test_em_single_component_reduces_to_plain_moments(rng):
    x = rng.normal(size=(3, 11))
    t = em_temporary_stats(x, np.ones((11, 1)))
    mean, var = colwise_mean_var(x)
    assert t.tau[0] == 1.0
    np.testing.assert_allclose(t.mu[0], mean, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(t.var[0], var, rtol=1e-14, atol=1e-15)


def test_em_one_hot_halves(rng):
    x = rng.normal(size=(2, 10))
    w = np.zeros((10, 2))
    w[:5, 0] = 1
    w[5:, 1] = 1
    t = em_temporary_stats(x, w)
    for j, cols in enumerate((slice(0, 5), slice(5, 10))):
        mean, var = colwise_mean_var(x[:, cols])
        np.testing.assert_allclose(t.mu[j], mean, atol=1e-15)
        np.testing.assert_allclose(t.var[j], var, atol=1e-15)
    np.testing.assert_array_equal(t.tau, [0.5, 0.5])


def test_em_fractional_weights_match_weighted_moment_oracle():
    x = np.array([[0.5, -1.0, 2.0, 3.5], [1.0, 0.0, -2.0, 0.25]])
    w = np.array([[0.9, 0.1], [0.3, 0.7], [0.5, 0.5], [0.05, 0.95]])
    t = em_temporary_stats(x, w)
    for j in range(2):
        mean, var = mp_weighted_moments(x, w[:, j])
        np.testing.assert_allclose(t.mu[j], mean, rtol=1e-14)
        np.testing.assert_allclose(t.var[j], var, rtol=1e-14)
    np.testing.assert_allclose(t.tau, w.sum(axis=0) / 4, rtol=1e-15)
    assert abs(t.tau.sum() - 1.0) < 1e-12


def test_em_uniform_weights_give_global_mean(rng):
    x = rng.normal(size=(4, 30))
    t = em_temporary_stats(x, np.full((30, 3), 1.0 / 3))
    mean, _ = colwise_mean_var(x)
    assert np.all(np.abs(t.mu - mean) < 1e-10)


def test_em_starved_component_carries_forward(rng):
    x = rng.normal(size=(2, 6))
    w = np.zeros((6, 2))
    w[:, 0] = 1.0
    t = em_temporary_stats(x, w)
    assert t.starved.tolist() == [False, True]
    s = init_mixture(2, 2, Rng(0), 0.5)
    before = s.copy()
    accumulate_em(s, t, 0.1)
    np.testing.assert_array_equal(s.mu[1], before.mu[1])
    np.testing.assert_array_equal(s.var[1], before.var[1])
    assert s.starvation_events == 1
    assert abs(s.tau.sum() - 1.0) < 1e-12


# accumulation

def _temp(s, tau, mu, var):
    return TempStats(np.asarray(tau, float), np.asarray(mu, float), np.asarray(var, float), np.zeros(s.M, bool))


def test_accumulate_em_extremes():
    s = init_mixture(2, 1)
    t = _temp(s, [0.7, 0.3], [[2.0], [3.0]], [[4.0], [5.0]])
    keep = accumulate_em(s.copy(), t, 1.0)
    np.testing.assert_array_equal(keep.mu, s.mu)
    replaced = accumulate_em(s.copy(), t, 0.0)
    np.testing.assert_array_equal(replaced.tau, t.tau)
    np.testing.assert_array_equal(replaced.var, t.var)


def test_accumulate_em_blend_arithmetic():
    s = init_mixture(2, 1)
    s.tau[:] = 0.5
    accumulate_em(s, _temp(s, [0.7, 0.3], [[0.0], [0.0]], [[1.0], [1.0]]), 0.1)
    assert s.tau[0] == pytest.approx(0.1 * 0.5 + 0.9 * 0.7, abs=1e-15)
    assert s.tau[0] == pytest.approx(0.68, abs=1e-15)


def test_momentum_on_new_inverts_weights():
    s = init_mixture(2, 1, momentum_on_new=True)
    accumulate_em(s, _temp(s, [0.7, 0.3], [[1.0], [1.0]], [[1.0], [1.0]]), 0.1)
    assert s.tau[0] == pytest.approx(0.9 * 0.5 + 0.1 * 0.7)


def test_accumulate_split():
    s = init_mixture(3, 2)
    unchanged = accumulate_split(s.copy(), 1, [5.0, 5.0], [2.0, 2.0], 1.0)
    np.testing.assert_array_equal(unchanged.mu, s.mu)
    replaced = accumulate_split(s.copy(), 1, [5.0, 5.0], [2.0, 2.0], 0.0)
    np.testing.assert_array_equal(replaced.mu[1], [5.0, 5.0])
    blended = accumulate_split(s.copy(), 2, [1.0, 1.0], [1.0, 1.0], 0.1)
    np.testing.assert_allclose(blended.mu[2], 0.9)
    np.testing.assert_array_equal(blended.tau, s.tau)
    np.testing.assert_array_equal(blended.mu[:2], s.mu[:2])
    with pytest.raises(IndexError):
        accumulate_split(s, 3, [0, 0], [1, 1])


def test_prior_sum_preserved_through_mixed_updates():
    r = Rng(11)
    s = init_mixture(4, 3, r.split("init"), 0.5)
    for step in range(1000):
        x = r.normal(0.0, 2.0, size=(3, 16))
        lam = float(r.uniform())
        if step % 3 == 2:
            accumulate_split(s, int(r.integers(4)), x.mean(axis=1), x.var(axis=1), lam)
        else:
            accumulate_em(s, em_temporary_stats(x, responsibilities(x, s)), lam)
        assert abs(s.tau.sum() - 1.0) < 1e-9
        assert np.all(s.var >= 0) and np.all(s.tau >= 0)


def test_planted_mixture_recovery():
    r = Rng(2024)
    planted = np.array([[-2.0, -2.0], [2.0, 2.0]])
    s = init_mixture(2, 2, r.split("init"), 1.0, lambda_c=0.9)
    data = r.split("data")
    for _ in range(200):
        comp = data.integers(0, 2, size=256)
        x = (planted[comp] + data.normal(size=(256, 2))).T
        accumulate_em(s, em_temporary_stats(x, responsibilities(x, s)))
    best = min(itertools.permutations(range(2)), key=lambda p: np.abs(s.mu[list(p)] - planted).max())
    assert np.abs(s.mu[list(best)] - planted).max() < 0.15
    assert np.abs(s.tau[list(best)] - 0.5).max() < 0.05


def test_json_fragment_roundtrip():
    s = init_mixture(3, 2, Rng(1), 0.2)
    frag = json.loads(json.dumps(s.to_dict()))
    assert set(frag) == {"tau", "mu", "var", "eps", "lambda_c", "lambda_s"}
    back = MixtureState.from_dict(frag)
    np.testing.assert_array_equal(back.mu, s.mu)
    np.testing.assert_array_equal(back.tau, s.tau)
