"""Calibration and accuracy diagnostics: expected coverage, classifier two-sample
tests and HPR mass metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import ConditionalEstimator
from .ndcore import AdamState, DenseNetwork, adam_step
from .tasks import TaskSpec, replace_invalid, simulate_batch
from .truncation import TruncatedProposal, sample_mixture, sample_truncated

COVERAGE_LEVELS = np.linspace(0.0, 1.0, 101)


# ---------------------------------------------------------------------------
# Expected coverage
# ---------------------------------------------------------------------------


@dataclass
class CoverageReport:
    e: np.ndarray  # per-pair fraction of posterior draws with higher density than theta*
    m: int
    p: int
    levels: np.ndarray = field(default_factory=lambda: COVERAGE_LEVELS.copy())
    notes: list[str] = field(default_factory=list)

    @property
    def curve(self) -> np.ndarray:
        """Fraction of pairs whose theta* lies inside the level-``L`` HPR, per level.

        ``theta*`` is inside the ``L`` region when ``e < L``; the top level is
        pinned to 1 since every draw lies in the full-mass region.
        """
        c = np.mean(self.e[None, :] < self.levels[:, None], axis=1)
        c[self.levels >= 1.0] = 1.0
        return c

    @property
    def counts(self) -> np.ndarray:
        return np.rint(self.e * self.p).astype(np.int64)

    def coverage_at(self, level: float) -> float:
        return float(np.mean(self.e < level))

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.curve - self.levels)))


def _as_sampler(source) -> Callable[[int, np.random.Generator], np.ndarray]:
    if isinstance(source, TruncatedProposal):
        return lambda n, rng: sample_truncated(source, n, rng)[0]
    return source


def _simulate_pairs(task: TaskSpec, theta_star: np.ndarray, rng: np.random.Generator, workers: int):
    seed = int(rng.integers(2 ** 63))
    x = simulate_batch(task, theta_star, seed, 0, workers, phase="coverage")
    if not np.all(np.isfinite(x)):
        x, _ = replace_invalid(x, task.policy)
    return x


def _posterior_log_probs(est: ConditionalEstimator, x: np.ndarray, p: int, rng: np.random.Generator,
                         keep=None, max_factor: int = 100) -> np.ndarray:
    """Log-densities of ``p`` estimator draws at ``x`` (optionally only draws passing ``keep``)."""
    if keep is None:
        return np.atleast_1d(est.log_prob(est.sample(x, p, rng), x))
    kept: list[np.ndarray] = []
    n_kept, drawn = 0, 0
    while n_kept < p and drawn < max_factor * p:
        draws = est.sample(x, p, rng)
        drawn += p
        draws = draws[keep(draws)]
        kept.append(np.atleast_1d(est.log_prob(draws, x)) if draws.shape[0] else np.empty(0))
        n_kept += draws.shape[0]
    return np.concatenate(kept)[:p]


def _coverage(theta_star, task, est, p, rng, workers=1, keep=None) -> tuple[np.ndarray, list[str]]:
    x = _simulate_pairs(task, theta_star, rng, workers)
    e = np.empty(theta_star.shape[0])
    short = 0
    for i in range(theta_star.shape[0]):
        l_star = np.atleast_1d(est.log_prob(theta_star[i], x[i]))[0]
        lps = _posterior_log_probs(est, x[i], p, rng, keep)
        if lps.size < p:
            short += 1
        e[i] = np.mean(lps > l_star) if lps.size else 1.0
    notes = [f"{short} pairs had fewer than {p} posterior draws after truncation"] if short else []
    return e, notes


def sbcc(proposal_sampler, task: TaskSpec, est: ConditionalEstimator, m: int, p: int,
         rng: np.random.Generator, workers: int = 1) -> CoverageReport:
    """Expected-coverage test.

    For ``m`` draws ``theta*`` from ``proposal_sampler`` (a callable
    ``(n, rng) -> theta`` or a :class:`TruncatedProposal`), simulate ``x*`` and
    record the fraction of ``p`` posterior draws whose log-density at ``x*``
    strictly exceeds that of ``theta*``.
    """
    if m < 100 or p < 100:
        raise ValueError("sbcc needs M >= 100 and P >= 100")
    theta_star = _as_sampler(proposal_sampler)(m, rng)
    e, notes = _coverage(theta_star, task, est, p, rng, workers)
    return CoverageReport(e, m, p, notes=notes)


def sbcc_multiround(proposals: list[TruncatedProposal], task: TaskSpec, est: ConditionalEstimator,
                    m: int, p: int, rng: np.random.Generator, strategy: str = "pooled",
                    sampler: str = "auto", k: int = 1024, workers: int = 1) -> CoverageReport:
    """Coverage for a multi-round run.

    ``"pooled"`` draws ``theta*`` from the uniform mixture of every round's
    proposal. ``"truncated"`` draws from the latest proposal and discards
    posterior draws outside that proposal's region at ``x_o``; its result only
    speaks to calibration inside the truncated region.
    """
    if not proposals:
        raise ValueError("need at least one completed round")
    if m < 100 or p < 100:
        raise ValueError("sbcc needs M >= 100 and P >= 100")
    if strategy == "pooled":
        theta_star = sample_mixture(proposals, m, rng, sampler, k)
        e, notes = _coverage(theta_star, task, est, p, rng, workers)
        return CoverageReport(e, m, p, notes=notes)
    if strategy != "truncated":
        raise ValueError(f"unknown strategy {strategy!r}")
    current = proposals[-1]
    theta_star = sample_truncated(current, m, rng, sampler, k)[0]
    keep = None if current.is_prior else (lambda th: current.log_q(th) > current.tau)
    e, notes = _coverage(theta_star, task, est, p, rng, workers, keep)
    notes.append("truncated-posterior strategy: calibration is assessed inside the truncated region only")
    return CoverageReport(e, m, p, notes=notes)


def sbc_ranks(proposal_sampler, task: TaskSpec, est: ConditionalEstimator, m: int, p: int,
              rng: np.random.Generator, workers: int = 1) -> np.ndarray:
    """Rank statistics of simulation-based calibration with the projection
    ``theta -> log q(theta | x)``: the number of posterior draws whose projection
    is below that of ``theta*``. Uses the same random streams as :func:`sbcc`."""
    theta_star = _as_sampler(proposal_sampler)(m, rng)
    x = _simulate_pairs(task, theta_star, rng, workers)
    ranks = np.empty(m, dtype=np.int64)
    for i in range(m):
        t_star = np.atleast_1d(est.log_prob(theta_star[i], x[i]))[0]
        draws = est.sample(x[i], p, rng)
        ranks[i] = int(np.sum(np.atleast_1d(est.log_prob(draws, x[i])) < t_star))
    return ranks


def posterior_coverage(est: ConditionalEstimator, x_o, reference_samples, p: int,
                       rng: np.random.Generator) -> CoverageReport:
    """Coverage of true-posterior samples by the estimator's HPRs at a single ``x_o``."""
    x_o = np.asarray(x_o, dtype=np.float64)
    ref = np.atleast_2d(np.asarray(reference_samples, dtype=np.float64))
    lps = np.sort(np.atleast_1d(est.log_prob(est.sample(x_o, p, rng), x_o)))
    l_ref = np.atleast_1d(est.log_prob(ref, x_o))
    e = (p - np.searchsorted(lps, l_ref, side="right")) / p
    return CoverageReport(e, ref.shape[0], p)


# ---------------------------------------------------------------------------
# Classifier two-sample test
# ---------------------------------------------------------------------------


@dataclass
class C2stResult:
    accuracy: float
    fold_accuracies: list[float]
    n_a: int
    n_b: int


def _train_classifier(x, y, rng, hidden, max_epochs, batch, lr, patience):
    net = DenseNetwork([x.shape[1], hidden, hidden, 1], "relu", rng)
    n = x.shape[0]
    n_val = max(1, n // 10)
    perm = rng.permutation(n)
    vi, ti = perm[:n_val], perm[n_val:]
    params = net.params()
    state = AdamState.for_params(params, lr=lr)

    def val_loss():
        z = net.forward(x[vi])[:, 0]
        return float(np.mean(np.logaddexp(0.0, z) - y[vi] * z))

    best, best_state, wait = val_loss(), [q.copy() for q in params], 0
    for _ in range(max_epochs):
        order = rng.permutation(ti)
        for s in range(0, order.size, batch):
            idx = order[s:s + batch]
            z, cache = net.forward_cached(x[idx])
            prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
            adj = ((prob - y[idx]) / idx.size)[:, None]
            adam_step(params, net.backward(x[idx], adj, cache).params, state)
        cur = val_loss()
        if cur < best - 1e-6:
            best, best_state, wait = cur, [q.copy() for q in params], 0
        else:
            wait += 1
            if wait >= patience:
                break
    for q, b in zip(params, best_state):
        q[...] = b
    return net


def c2st(samples_a, samples_b, rng: np.random.Generator, folds: int = 5, max_epochs: int = 100,
         batch: int = 128, lr: float = 1e-3, patience: int = 10) -> C2stResult:
    """Cross-validated accuracy of an MLP classifier separating two sample sets.

    Features are z-scored jointly. Folds are stratified; each fold trains a
    fresh two-hidden-layer ReLU network of width ``10 * dim``.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    if a.shape[0] < 500 or b.shape[0] < 500:
        raise ValueError("c2st needs at least 500 samples per side")
    if a.shape[0] != b.shape[0]:
        raise ValueError("c2st needs equal sample counts")
    x = np.concatenate([a, b], axis=0)
    x = (x - x.mean(0)) / np.maximum(x.std(0), 1e-8)
    y = np.concatenate([np.zeros(a.shape[0]), np.ones(b.shape[0])])
    fold_of = np.empty(y.size, dtype=np.int64)
    for label in (0.0, 1.0):
        idx = np.flatnonzero(y == label)
        fold_of[idx[rng.permutation(idx.size)]] = np.arange(idx.size) % folds
    accs = []
    for f in range(folds):
        train, test = fold_of != f, fold_of == f
        net = _train_classifier(x[train], y[train], rng, 10 * x.shape[1], max_epochs, batch, lr, patience)
        pred = net.forward(x[test])[:, 0] > 0.0
        accs.append(float(np.mean(pred == (y[test] > 0.5))))
    return C2stResult(float(np.mean(accs)), accs, a.shape[0], b.shape[0])


# ---------------------------------------------------------------------------
# Mass metrics
# ---------------------------------------------------------------------------


def prior_mass_in_hpr(proposal: TruncatedProposal, n: int, rng: np.random.Generator) -> float:
    """Fraction of prior draws inside the proposal's HPR."""
    if n < 1000:
        raise ValueError("n must be >= 1000")
    return float(np.mean(proposal.in_hpr(proposal.prior.sample(n, rng))))


def true_posterior_mass_in_hpr(proposal: TruncatedProposal, reference_samples) -> float:
    """Fraction of reference-posterior draws inside the proposal's HPR."""
    ref = np.atleast_2d(np.asarray(reference_samples, dtype=np.float64))
    if ref.shape[0] < 1000:
        raise ValueError("need at least 1000 reference samples")
    return float(np.mean(proposal.in_hpr(ref)))


def leakage_fraction(est: ConditionalEstimator, x_o, prior, n: int, rng: np.random.Generator) -> float:
    """Fraction of estimator draws at ``x_o`` outside the prior support."""
    if n < 1000:
        raise ValueError("n must be >= 1000")
    draws = est.sample(np.asarray(x_o, dtype=np.float64), n, rng)
    return float(1.0 - np.mean(prior.support(draws)))


__all__ = ["COVERAGE_LEVELS", "C2stResult", "CoverageReport", "c2st", "leakage_fraction",
           "posterior_coverage", "prior_mass_in_hpr", "sbc_ranks", "sbcc", "sbcc_multiround",
           "true_posterior_mass_in_hpr"]
