"""Truncated proposals: the prior restricted to the estimator's highest-probability
region at ``x_o``, and samplers for it.

The region is ``{theta : log q(theta | x_o) > tau}`` intersected with the prior
support, where ``tau`` is a low order statistic of the log-densities of the
estimator's own samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .density import ConditionalEstimator
from .tasks.priors import Prior

log = logging.getLogger(__name__)

DEFAULT_K = 1024
DEFAULT_M_THRESHOLD = 10_000
AUTO_PILOT_DRAWS = 100_000
AUTO_MIN_ACCEPTANCE = 1e-3
MAX_SIR_REDRAWS = 100
_CHUNK = 1 << 17


class SamplerError(RuntimeError):
    """A truncated-proposal sampler could not produce the requested draws."""


class RejectionBudgetExceeded(SamplerError):
    def __init__(self, acceptance_rate: float, n_drawn: int):
        super().__init__(f"rejection sampling exhausted its budget after {n_drawn} draws "
                         f"(acceptance rate {acceptance_rate:.3g})")
        self.acceptance_rate = acceptance_rate
        self.n_drawn = n_drawn


class SirFailure(SamplerError):
    """Every SIR candidate batch had zero total weight."""


def _chunked_log_prob(est: ConditionalEstimator, theta: np.ndarray, x_o: np.ndarray) -> np.ndarray:
    if theta.shape[0] == 0:
        return np.empty(0)
    return np.concatenate([np.atleast_1d(est.log_prob(theta[i:i + _CHUNK], x_o))
                           for i in range(0, theta.shape[0], _CHUNK)])


def threshold_rank(epsilon: float, m: int) -> int:
    """``ceil(epsilon * m)``, robust to floating-point noise in the product."""
    return math.ceil(round(epsilon * m, 9))


def estimate_threshold(est: ConditionalEstimator, x_o, epsilon: float, m: int,
                       rng: np.random.Generator) -> float:
    """The ``ceil(epsilon * m)``-th smallest log q(theta_i | x_o) over ``m`` estimator draws."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if m < 1000:
        raise ValueError("need at least 1000 samples to estimate the threshold")
    if round(epsilon * m, 9) < 1:
        raise ValueError(f"epsilon * M = {epsilon * m:g} < 1: the quantile is undefined at this resolution")
    k = threshold_rank(epsilon, m)
    x_o = np.asarray(x_o, dtype=np.float64)
    lp = _chunked_log_prob(est, est.sample(x_o, m, rng), x_o)
    if not np.all(np.isfinite(lp)):
        raise ValueError("estimator produced non-finite log-densities for its own samples")
    return float(np.partition(lp, k - 1)[k - 1])


@dataclass
class TruncatedProposal:
    """Prior restricted to ``log q(theta | x_o) > tau``.

    ``estimator=None`` with ``tau=-inf`` is the untruncated prior.
    """

    prior: Prior
    estimator: ConditionalEstimator | None
    x_o: np.ndarray
    epsilon: float | None = None
    tau: float = -np.inf
    m_threshold: int | None = None

    @classmethod
    def from_prior(cls, prior: Prior, x_o) -> "TruncatedProposal":
        return cls(prior, None, np.asarray(x_o, dtype=np.float64))

    @classmethod
    def fit(cls, prior: Prior, est: ConditionalEstimator, x_o, epsilon: float,
            rng: np.random.Generator, m_threshold: int = DEFAULT_M_THRESHOLD) -> "TruncatedProposal":
        x_o = np.asarray(x_o, dtype=np.float64)
        tau = estimate_threshold(est, x_o, epsilon, m_threshold, rng)
        return cls(prior, est, x_o, epsilon, tau, m_threshold)

    @property
    def is_prior(self) -> bool:
        return self.estimator is None or self.tau == -np.inf

    def log_q(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if self.estimator is None:
            return np.zeros(theta.shape[0])
        return _chunked_log_prob(self.estimator, theta, self.x_o)

    def in_hpr(self, theta) -> np.ndarray:
        """True iff log q(theta | x_o) > tau and theta is in the prior support."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        inside = np.atleast_1d(self.prior.support(theta))
        if self.is_prior:
            return inside
        out = np.zeros(theta.shape[0], dtype=bool)
        if inside.any():
            out[inside] = self.log_q(theta[inside]) > self.tau
        return out

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "tau": None if self.tau == -np.inf else self.tau,
                "M_threshold": self.m_threshold}


def in_hpr(proposal: TruncatedProposal, theta) -> np.ndarray:
    return proposal.in_hpr(theta)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


@dataclass
class SirStats:
    ess: np.ndarray
    k: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.ess)) if self.ess.size else float("nan")

    @property
    def min(self) -> float:
        return float(np.min(self.ess)) if self.ess.size else float("nan")


@dataclass
class SamplerReport:
    sampler: str  # "prior", "rejection" or "sir"
    acceptance_rate: float | None = None
    n_drawn: int = 0
    sir: SirStats | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"sampler": self.sampler, "acceptance_rate": self.acceptance_rate, "K": None,
               "ess_summary": None}
        if self.sir is not None:
            out["K"] = self.sir.k
            out["ess_summary"] = {"mean": self.sir.mean, "min": self.sir.min}
        return out


def ess(weights) -> float:
    """Effective sample size ``1 / sum(w^2)`` of normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    return float(1.0 / np.sum(w * w))


def sample_truncated_rejection(proposal: TruncatedProposal, n: int, rng: np.random.Generator,
                               max_draws: int = 10 ** 7, min_acceptance: float | None = None,
                               pilot_draws: int = AUTO_PILOT_DRAWS) -> tuple[np.ndarray, SamplerReport]:
    """Exact draws from the truncated prior by accept/reject on prior samples.

    With ``min_acceptance`` set, the first ``pilot_draws`` prior samples serve as
    a pilot and :class:`RejectionBudgetExceeded` is raised early if their
    acceptance rate falls below it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    accepted: list[np.ndarray] = []
    n_acc, drawn = 0, 0
    batch = pilot_draws if min_acceptance is not None else max(1000, 2 * n)
    while n_acc < n:
        batch = int(min(batch, max_draws - drawn))
        if batch <= 0:
            rate = n_acc / max(drawn, 1)
            raise RejectionBudgetExceeded(rate, drawn)
        theta = proposal.prior.sample(batch, rng)
        keep = theta[proposal.in_hpr(theta)]
        drawn += batch
        accepted.append(keep)
        n_acc += keep.shape[0]
        rate = n_acc / drawn
        if min_acceptance is not None and drawn >= pilot_draws and rate < min_acceptance and n_acc < n:
            raise RejectionBudgetExceeded(rate, drawn)
        remaining = n - n_acc
        batch = int(np.clip(1.2 * remaining / max(rate, 1e-9), 1000, 1_000_000))
    samples = np.concatenate(accepted, axis=0)[:n]
    return samples, SamplerReport("rejection", n_acc / drawn, drawn)


def sample_truncated_sir(proposal: TruncatedProposal, n: int, rng: np.random.Generator,
                         k: int = DEFAULT_K, max_redraws: int = MAX_SIR_REDRAWS) -> tuple[np.ndarray, SirStats]:
    """Sampling-importance-resampling from the estimator towards the truncated prior.

    For each output draw, ``k`` estimator samples get weights
    ``p(theta) 1[theta in HPR] / q(theta | x_o)``; one is resampled in proportion
    to them. A candidate set whose weights are all zero is redrawn, up to
    ``max_redraws`` times.
    """
    if k < 2:
        raise ValueError("K must be >= 2")
    if proposal.estimator is None:
        raise ValueError("SIR needs an estimator")
    est, x_o = proposal.estimator, proposal.x_o
    d = proposal.prior.dim
    out = np.empty((n, d))
    ess_vals = np.empty(n)
    pending = np.arange(n)
    attempts = np.zeros(n, dtype=int)
    rows_per_chunk = max(1, _CHUNK // k)
    while pending.size:
        rows = pending[:rows_per_chunk]
        c = rows.size
        cand = est.sample(x_o, c * k, rng)
        lq = _chunked_log_prob(est, cand, x_o)
        lp = np.atleast_1d(proposal.prior.log_prob(cand))
        ok = proposal.in_hpr(cand) & np.isfinite(lq)
        logw = np.where(ok, lp - np.where(ok, lq, 0.0), -np.inf).reshape(c, k)
        cand = cand.reshape(c, k, d)
        has = np.isfinite(logw).any(axis=1)
        for i in np.flatnonzero(has):
            w = np.exp(logw[i] - logsumexp(logw[i]))
            w /= w.sum()
            ess_vals[rows[i]] = ess(w)
            out[rows[i]] = cand[i, rng.choice(k, p=w)]
        attempts[rows[~has]] += 1
        if np.any(attempts > max_redraws):
            raise SirFailure(f"all {k} SIR weights were zero in {max_redraws + 1} consecutive candidate "
                             f"sets; the HPR barely overlaps the prior support")
        pending = np.concatenate([rows[~has], pending[c:]])
    return out, SirStats(ess_vals, k)


def sample_truncated(proposal: TruncatedProposal, n: int, rng: np.random.Generator,
                     sampler: str = "auto", k: int = DEFAULT_K,
                     max_draws: int = 10 ** 7) -> tuple[np.ndarray, SamplerReport]:
    """Dispatch to a sampler; ``"auto"`` starts with rejection and switches to SIR
    when fewer than 1e-3 of the first 1e5 prior draws are accepted."""
    if proposal.is_prior:
        return proposal.prior.sample(n, rng), SamplerReport("prior", 1.0, n)
    if sampler == "rejection":
        return sample_truncated_rejection(proposal, n, rng, max_draws)
    if sampler == "sir":
        theta, stats = sample_truncated_sir(proposal, n, rng, k)
        return theta, SamplerReport("sir", sir=stats)
    if sampler != "auto":
        raise ValueError(f"unknown sampler {sampler!r}")
    try:
        return sample_truncated_rejection(proposal, n, rng, max_draws, min_acceptance=AUTO_MIN_ACCEPTANCE)
    except RejectionBudgetExceeded as exc:
        log.info("rejection acceptance %.2e below %.0e; switching to SIR", exc.acceptance_rate,
                 AUTO_MIN_ACCEPTANCE)
        theta, stats = sample_truncated_sir(proposal, n, rng, k)
        return theta, SamplerReport("sir", exc.acceptance_rate, exc.n_drawn, stats,
                                    ["fell back from rejection sampling"])


def sample_mixture(proposals: list[TruncatedProposal], n: int, rng: np.random.Generator,
                   sampler: str = "auto", k: int = DEFAULT_K) -> np.ndarray:
    """Draws from the uniform mixture of ``proposals`` (the pooled proposal)."""
    if not proposals:
        raise ValueError("need at least one proposal")
    if len(proposals) == 1:
        return sample_truncated(proposals[0], n, rng, sampler, k)[0]
    counts = rng.multinomial(n, np.full(len(proposals), 1.0 / len(proposals)))
    parts = [sample_truncated(p, int(c), rng, sampler, k)[0] for p, c in zip(proposals, counts) if c > 0]
    theta = np.concatenate(parts, axis=0)
    return theta[rng.permutation(n)]
