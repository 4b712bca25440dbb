import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tsnpe.density import GaussianEstimator
from tsnpe.tasks.priors import BoxUniform
from tsnpe.truncation import (RejectionBudgetExceeded, SirFailure, TruncatedProposal, ess, estimate_threshold,
                              sample_mixture, sample_truncated, sample_truncated_rejection, sample_truncated_sir,
                              threshold_rank)

STD_NORMAL_1D = GaussianEstimator.fixed([0.0], [1.0])
X_O = np.zeros(1)


def gaussian_proposal(prior, half_width, mean=0.0, std=1.0):
    """Proposal whose HPR is the interval ``mean +- half_width`` (before prior clipping)."""
    est = GaussianEstimator.fixed([mean], [std])
    tau = float(est.log_prob(np.array([mean + half_width]), X_O))
    return TruncatedProposal(prior, est, X_O, 0.1, tau, 10_000)


# ---------------------------------------------------------------------------
# Threshold
# ---------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 0.999), st.integers(1000, 10 ** 7))
def test_threshold_rank_is_ceiling(eps, m):
    k = threshold_rank(eps, m)
    assert k == math.ceil(round(eps * m, 9))
    assert 1 <= k <= m


def test_threshold_rank_exact_products():
    assert threshold_rank(1e-4, 10_000) == 1
    assert threshold_rank(0.1, 10_000) == 1000
    assert threshold_rank(0.07, 100_000) == 7000


@pytest.mark.parametrize("eps", [1e-3, 0.05, 0.3])
def test_threshold_is_order_statistic_of_own_samples(eps):
    m = 5000
    tau = estimate_threshold(STD_NORMAL_1D, X_O, eps, m, np.random.default_rng(0))
    lp = STD_NORMAL_1D.log_prob(STD_NORMAL_1D.sample(X_O, m, np.random.default_rng(0)), X_O)
    k = threshold_rank(eps, m)
    assert np.sum(lp <= tau) >= k
    assert np.sum(lp < tau) < k


def test_threshold_matches_gaussian_quantile():
    # For a standard normal in d dims the (1 - eps) HPR is the chi-square ball.
    d, eps = 3, 0.1
    est = GaussianEstimator.fixed(np.zeros(d), np.ones(d))
    tau = estimate_threshold(est, X_O, eps, 200_000, np.random.default_rng(1))
    r2 = stats.chi2.ppf(1 - eps, d)
    expected = -0.5 * r2 - 0.5 * d * np.log(2 * np.pi)
    assert tau == pytest.approx(expected, abs=0.02)


def test_threshold_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        estimate_threshold(STD_NORMAL_1D, X_O, 0.0, 10_000, rng)
    with pytest.raises(ValueError):
        estimate_threshold(STD_NORMAL_1D, X_O, 1.0, 10_000, rng)
    with pytest.raises(ValueError):
        estimate_threshold(STD_NORMAL_1D, X_O, 0.1, 999, rng)
    with pytest.raises(ValueError, match="quantile"):
        estimate_threshold(STD_NORMAL_1D, X_O, 1e-5, 10_000, rng)


# ---------------------------------------------------------------------------
# HPR membership
# ---------------------------------------------------------------------------


def test_hpr_boundary_is_strict_and_clipped_to_support():
    prior = BoxUniform([-1.0], [1.0])
    prop = gaussian_proposal(prior, 1.5)
    assert not prop.in_hpr(np.array([[1.5]]))[0]
    assert not prop.in_hpr(np.array([[-1.5]]))[0]
    assert not prop.in_hpr(np.array([[1.2]]))[0]  # inside the level set, outside the prior
    assert prop.in_hpr(np.array([[0.9]]))[0]


def test_prior_proposal_accepts_whole_support():
    prior = BoxUniform([-1.0, -1.0], [1.0, 1.0])
    prop = TruncatedProposal.from_prior(prior, np.zeros(2))
    assert prop.is_prior
    pts = np.array([[0.0, 0.0], [0.99, -0.99], [1.5, 0.0]])
    assert list(prop.in_hpr(pts)) == [True, True, False]
    assert prop.to_dict() == {"epsilon": None, "tau": None, "M_threshold": None}


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(0, 2 ** 31))
def test_hpr_contains_at_least_one_minus_eps_of_estimator_mass(eps, seed):
    # Everything strictly above the order statistic is inside, so at least M - k of M draws.
    prior = BoxUniform([-50.0], [50.0])
    m = 2000
    prop = TruncatedProposal.fit(prior, STD_NORMAL_1D, X_O, eps, np.random.default_rng(seed), m)
    draws = STD_NORMAL_1D.sample(X_O, m, np.random.default_rng(seed))
    assert np.sum(prop.in_hpr(draws)) >= m - threshold_rank(eps, m)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("sampler", ["rejection", "sir", "auto"])
def test_samples_follow_truncated_prior(sampler):
    prior = BoxUniform([-3.0], [3.0])
    prop = gaussian_proposal(prior, 1.5)
    theta, report = sample_truncated(prop, 3000, np.random.default_rng(2), sampler=sampler, k=256)
    assert theta.shape == (3000, 1)
    assert np.all(prop.in_hpr(theta))
    assert stats.kstest(theta[:, 0], stats.uniform(-1.5, 3.0).cdf).pvalue > 0.01
    assert report.sampler == ("sir" if sampler == "sir" else "rejection")


def test_sir_on_two_dimensional_box_matches_uniform_moments():
    prior = BoxUniform([-2.0, -2.0], [2.0, 2.0])
    est = GaussianEstimator.fixed([0.0, 0.0], [0.7, 0.7])
    tau = float(est.log_prob(np.array([0.0, 1.0]), X_O))
    prop = TruncatedProposal(prior, est, X_O, 0.1, tau, 10_000)
    theta, st_ = sample_truncated_sir(prop, 4000, np.random.default_rng(3), k=128)
    # uniform on the unit disc: E r^2 = 1/2, mean 0
    r2 = np.sum(theta ** 2, axis=1)
    assert np.all(r2 < 1.0)
    assert abs(r2.mean() - 0.5) < 4 * np.sqrt(1 / 12) / np.sqrt(4000)
    assert np.all(np.abs(theta.mean(0)) < 4 * 0.5 / np.sqrt(4000))
    assert 1.0 <= st_.min <= st_.mean <= 128


def test_auto_switches_to_sir_on_tiny_region():
    prior = BoxUniform([-100.0], [100.0])
    prop = gaussian_proposal(prior, 0.05, std=0.02)
    theta, report = sample_truncated(prop, 500, np.random.default_rng(4), k=64)
    assert report.sampler == "sir"
    assert report.acceptance_rate < 1e-3
    assert "fell back from rejection sampling" in report.notes
    assert np.all(np.abs(theta) < 0.05)
    d = report.to_dict()
    assert d["K"] == 64 and set(d["ess_summary"]) == {"mean", "min"}


def test_rejection_budget_is_reported():
    prior = BoxUniform([-100.0], [100.0])
    prop = gaussian_proposal(prior, 0.01, std=0.01)
    with pytest.raises(RejectionBudgetExceeded) as info:
        sample_truncated_rejection(prop, 1000, np.random.default_rng(5), max_draws=20_000)
    assert info.value.n_drawn == 20_000
    assert info.value.acceptance_rate < 1e-3


def test_sir_fails_when_region_misses_support():
    prior = BoxUniform([-1.0], [1.0])
    prop = gaussian_proposal(prior, 0.5, mean=10.0)
    with pytest.raises(SirFailure):
        sample_truncated_sir(prop, 10, np.random.default_rng(6), k=16, max_redraws=3)


def test_sampler_argument_checks():
    prior = BoxUniform([-1.0], [1.0])
    prop = gaussian_proposal(prior, 0.5)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_truncated(prop, 10, rng, sampler="gibbs")
    with pytest.raises(ValueError):
        sample_truncated_sir(prop, 10, rng, k=1)
    with pytest.raises(ValueError):
        sample_truncated_sir(TruncatedProposal.from_prior(prior, X_O), 10, rng)
    with pytest.raises(ValueError):
        sample_truncated_rejection(prop, 0, rng)


def test_prior_proposal_samples_prior():
    prior = BoxUniform([0.0], [1.0])
    a, rep = sample_truncated(TruncatedProposal.from_prior(prior, X_O), 100, np.random.default_rng(7))
    b = prior.sample(100, np.random.default_rng(7))
    assert np.array_equal(a, b) and rep.sampler == "prior"


def test_samplers_are_deterministic():
    prior = BoxUniform([-3.0], [3.0])
    prop = gaussian_proposal(prior, 1.0)
    for sampler in ("rejection", "sir"):
        a = sample_truncated(prop, 200, np.random.default_rng(8), sampler, k=32)[0]
        b = sample_truncated(prop, 200, np.random.default_rng(8), sampler, k=32)[0]
        assert np.array_equal(a, b)


def test_mixture_draws_equally_from_each_proposal():
    prior = BoxUniform([-10.0], [10.0])
    left, right = gaussian_proposal(prior, 1.0, mean=-5.0), gaussian_proposal(prior, 1.0, mean=5.0)
    n = 4000
    theta = sample_mixture([left, right], n, np.random.default_rng(9))
    frac = np.mean(theta[:, 0] < 0)
    assert abs(frac - 0.5) < 4 * np.sqrt(0.25 / n)
    assert np.all(left.in_hpr(theta) | right.in_hpr(theta))
    with pytest.raises(ValueError):
        sample_mixture([], 10, np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=40).filter(lambda v: sum(v) > 0))
def test_ess_bounds(raw):
    w = np.array(raw) / np.sum(raw)
    w /= w.sum()
    e = ess(w)
    assert 1.0 - 1e-9 <= e <= w.size + 1e-9


def test_ess_uniform_and_degenerate():
    assert ess(np.full(8, 1 / 8)) == pytest.approx(8.0)
    assert ess(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ess(np.array([0.5, 0.6]))
