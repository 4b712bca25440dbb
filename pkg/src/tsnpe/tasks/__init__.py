"""Benchmark problems: priors, simulators, observations, invalid-value handling
and reference-posterior oracles.

All numeric constants live in :mod:`tsnpe.tasks.constants`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import seeding
from . import constants as C
from .mcmc import OracleError, sir_initialize, slice_sample, split_rhat
from .priors import BoxUniform, DiagGaussian, Prior, UnionOfBoxes
from .simulators import (SLCP, BernoulliGLM, LinearGaussian, LotkaVolterra, SIREpidemic,
                         Simulator, Toy1D, TwoMoons)

log = logging.getLogger(__name__)

TASK_NAMES = ("toy1d", "linear_gaussian_uniform", "gaussian_linear", "two_moons", "slcp",
              "bernoulli_glm", "lotka_volterra", "sir_epidemic")


class OracleUnavailable(RuntimeError):
    """The task has no reference posterior."""


# ---------------------------------------------------------------------------
# Invalid-value policy
# ---------------------------------------------------------------------------


@dataclass
class InvalidPolicy:
    replacement: np.ndarray  # one finite value per summary

    @classmethod
    def fit(cls, pilot_x, overrides: dict[int, float] | None = None) -> "InvalidPolicy":
        """Replacement = (min of valid pilot values) - 2 * (their std), per column."""
        pilot_x = np.asarray(pilot_x, dtype=np.float64)
        out = np.zeros(pilot_x.shape[1])
        for j in range(pilot_x.shape[1]):
            col = pilot_x[:, j]
            col = col[np.isfinite(col)]
            if col.size:
                out[j] = col.min() - 2.0 * col.std()
            else:
                log.warning("summary %d has no valid pilot values; replacement set to 0", j)
        for j, v in (overrides or {}).items():
            out[int(j)] = float(v)
        if not np.all(np.isfinite(out)):
            raise ValueError("replacement values must be finite")
        return cls(out)


@dataclass
class InvalidReport:
    n_rows: int
    invalid_rows: np.ndarray  # indices of rows with any invalid entry
    per_column: np.ndarray  # invalid-entry count per summary

    @property
    def n_invalid_rows(self) -> int:
        return int(self.invalid_rows.size)


def invalid_mask(x) -> np.ndarray:
    return ~np.isfinite(np.asarray(x, dtype=np.float64))


def replace_invalid(x, policy: InvalidPolicy) -> tuple[np.ndarray, InvalidReport]:
    """Replace non-finite entries column-wise; valid entries are left untouched."""
    x = np.array(x, dtype=np.float64, ndmin=2)
    if x.shape[1] != policy.replacement.shape[0]:
        raise ValueError(f"batch width {x.shape[1]} does not match policy width "
                         f"{policy.replacement.shape[0]}")
    bad = invalid_mask(x)
    rows = np.flatnonzero(bad.any(axis=1))
    out = np.where(bad, policy.replacement[None, :], x)
    return out, InvalidReport(x.shape[0], rows, bad.sum(axis=0))


# ---------------------------------------------------------------------------
# Task specification
# ---------------------------------------------------------------------------


@dataclass
class TaskSpec:
    name: str
    index: int
    prior: Prior
    simulator: Simulator
    x_o: np.ndarray
    theta_true: np.ndarray
    oracle: str | None  # "analytic", "mcmc" or None
    symmetries: list[Callable] = field(default_factory=list)
    _policy: InvalidPolicy | None = field(default=None, repr=False)

    @property
    def theta_dim(self) -> int:
        return self.simulator.theta_dim

    @property
    def x_dim(self) -> int:
        return self.simulator.x_dim

    @property
    def policy(self) -> InvalidPolicy:
        """Fitted lazily on a fixed-seed pilot batch of prior predictives."""
        if self._policy is None:
            rng = seeding.derive_rng(C.PILOT_SEED, self.index)
            theta = self.prior.sample(C.PILOT_SIZE, rng)
            x = simulate_batch(self, theta, C.PILOT_SEED, self.index, phase="pilot")
            self._policy = InvalidPolicy.fit(x, C.INVALID_OVERRIDES.get(self.name))
        return self._policy

    def log_likelihood(self, theta, x=None) -> np.ndarray:
        x = self.x_o if x is None else np.asarray(x, dtype=np.float64)
        return self.simulator.log_likelihood(np.atleast_2d(theta), x)

    def log_posterior_unnorm(self, theta, x=None) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        lp = self.prior.log_prob(theta)
        out = np.full(theta.shape[0], -np.inf)
        ok = np.isfinite(lp)
        if ok.any():
            with np.errstate(all="ignore"):
                out[ok] = lp[ok] + self.log_likelihood(theta[ok], x)
        return np.where(np.isnan(out), -np.inf, out)


def _flip(j):
    def f(theta):
        out = theta.copy()
        out[:, j] = -out[:, j]
        return out
    return f


def _moons_reflect(theta):
    return -theta[:, ::-1]


def _negate(theta):
    return -theta


def _build(name: str) -> tuple[Prior, Simulator, str | None, list, dict]:
    if name == "toy1d":
        c = C.TOY1D
        return UnionOfBoxes([([a], [b]) for a, b in c["intervals"]]), Toy1D(c["noise_std"]), "mcmc", [_negate], c
    if name == "linear_gaussian_uniform":
        c = C.LINEAR_GAUSSIAN_UNIFORM
        return (BoxUniform(c["lower"], c["upper"]), LinearGaussian(len(c["lower"]), c["noise_std"], name),
                "mcmc", [], c)
    if name == "gaussian_linear":
        c = C.GAUSSIAN_LINEAR
        d = c["dim"]
        return (DiagGaussian(np.zeros(d), np.sqrt(c["prior_var"])),
                LinearGaussian(d, np.sqrt(c["noise_var"]), name), "analytic", [], c)
    if name == "two_moons":
        return BoxUniform([-1.0, -1.0], [1.0, 1.0]), TwoMoons(), "mcmc", [_moons_reflect], C.TWO_MOONS
    if name == "slcp":
        c = C.SLCP
        return BoxUniform([c["lower"]] * 5, [c["upper"]] * 5), SLCP(c), "mcmc", [_flip(2), _flip(3)], c
    if name == "bernoulli_glm":
        c = C.BERNOULLI_GLM
        return DiagGaussian(np.zeros(1 + c["n_filter"]), c["prior_std"]), BernoulliGLM(c), "mcmc", [], c
    if name == "lotka_volterra":
        c = C.LOTKA_VOLTERRA
        return DiagGaussian(c["prior_mean"], c["prior_std"]), LotkaVolterra(c), "mcmc", [], c
    if name == "sir_epidemic":
        c = C.SIR_EPIDEMIC
        return DiagGaussian(c["prior_mean"], c["prior_std"]), SIREpidemic(c), "mcmc", [], c
    raise KeyError(f"unknown task {name!r}; known tasks: {', '.join(TASK_NAMES)}")


def make_task(name: str, seed: int = 0) -> TaskSpec:
    """Build a task. ``seed`` selects the observation: the ground-truth parameter
    is drawn from the prior with a stream derived from ``seed`` (unless the task
    pins it), and ``x_o`` is simulated from it with its own derived stream."""
    prior, sim, oracle, sym, cfg = _build(name)
    index = TASK_NAMES.index(name)
    if "theta_true" in cfg:
        theta_true = np.asarray(cfg["theta_true"], dtype=np.float64)
    else:
        theta_true = prior.sample(1, seeding.derive_rng(C.OBSERVATION_SEED, index, seed, 0))[0]
    if cfg.get("noise_free_observation"):
        x_o = sim.transform(theta_true[None, :], np.zeros((1, sim.noise_dim)))[0]
    else:
        x_o = sim.simulate(theta_true, seeding.derive_rng(C.OBSERVATION_SEED, index, seed, 1))
    return TaskSpec(name, index, prior, sim, np.asarray(x_o, dtype=np.float64), theta_true, oracle, sym)


# ---------------------------------------------------------------------------
# Batched simulation
# ---------------------------------------------------------------------------


def _transform_rows(sim: Simulator, theta: np.ndarray, noise: np.ndarray, offset: int) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):
            return np.asarray(sim.transform(theta, noise), dtype=np.float64)
    except Exception:
        out = np.full((theta.shape[0], sim.x_dim), np.nan)
        for i in range(theta.shape[0]):
            try:
                with np.errstate(all="ignore"):
                    out[i] = sim.transform(theta[i:i + 1], noise[i:i + 1])[0]
            except Exception as exc:  # a failing row becomes fully invalid
                log.warning("simulator %s failed on row %d: %s", sim.name, offset + i, exc)
        return out


def simulate_batch(task: TaskSpec, theta, seed: int, round_index: int, workers: int = 1,
                   offset: int = 0, phase: str = "simulate") -> np.ndarray:
    """Simulate each row of ``theta`` with its own stream ``(seed, round, phase, offset + i)``.

    The output does not depend on ``workers``. Invalid entries are kept.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, task.theta_dim)
    n = theta.shape[0]
    sim = task.simulator
    if n == 0:
        return np.empty((0, sim.x_dim))
    noise = np.stack([sim.noise(r) for r in seeding.row_rngs(seed, round_index, phase, n, offset)])
    workers = max(1, min(int(workers), n))
    if workers == 1:
        return _transform_rows(sim, theta, noise, offset)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(lambda ab: _transform_rows(sim, theta[ab[0]:ab[1]], noise[ab[0]:ab[1]], offset + ab[0]),
                         zip(bounds[:-1], bounds[1:]))
        return np.concatenate(list(parts), axis=0)


# ---------------------------------------------------------------------------
# Reference posteriors
# ---------------------------------------------------------------------------


def gaussian_linear_posterior(x_o) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and per-dimension std of the conjugate posterior."""
    c = C.GAUSSIAN_LINEAR
    var = 1.0 / (1.0 / c["prior_var"] + 1.0 / c["noise_var"])
    x_o = np.asarray(x_o, dtype=np.float64)
    return var * x_o / c["noise_var"], np.full(x_o.shape, np.sqrt(var))


def reference_posterior(task: TaskSpec, n: int, rng: np.random.Generator, x_o=None,
                        n_chains: int = 20, burn: int = 300, thin: int = 2) -> np.ndarray:
    """``n`` draws from p(theta | x_o), exact where possible and slice-MCMC otherwise.

    MCMC output is accepted only when the split-R-hat of the log-density traces
    is below 1.05; a failing run is retried once with longer chains.
    """
    x_o = task.x_o if x_o is None else np.asarray(x_o, dtype=np.float64)
    if task.oracle is None:
        raise OracleUnavailable(f"task {task.name!r} has no reference posterior")
    if task.oracle == "analytic":
        mean, std = gaussian_linear_posterior(x_o)
        return mean + std * rng.standard_normal((n, task.theta_dim))

    def target(theta):
        return task.log_posterior_unnorm(theta, x_o)

    # Stage 1 locates the posterior; stage 2 runs in coordinates whitened by
    # the stage-1 covariance, which removes linear correlations.
    init = sir_initialize(target, task.prior.sample, n_chains, rng)
    pilot = sir_initialize(target, task.prior.sample, 200, rng)
    widths = np.maximum(2.0 * pilot.std(axis=0), 1e-3)
    warm = slice_sample(target, init, max(burn // 2, 50), rng, widths=widths, burn=burn)
    flat = warm.samples.reshape(-1, task.theta_dim)
    mu = flat.mean(axis=0)
    chol = np.linalg.cholesky(np.cov(flat, rowvar=False).reshape(task.theta_dim, task.theta_dim)
                              + 1e-12 * np.eye(task.theta_dim))

    def whitened(z):
        return target(mu + z @ chol.T)

    z0 = np.linalg.solve(chol, (warm.samples[:, -1] - mu).T).T
    per_chain = -(-n // n_chains)
    for attempt in range(2):
        scale = 1 + 2 * attempt
        res = slice_sample(whitened, z0, per_chain, rng, widths=3.0, burn=burn * scale, thin=thin * scale)
        if res.rhat < 1.05:
            break
        log.warning("reference posterior for %s: R-hat %.3f, retrying with longer chains", task.name, res.rhat)
        z0 = res.samples[:, -1]
    else:
        raise OracleError(f"reference posterior for {task.name!r} did not converge (R-hat {res.rhat:.3f})")
    res.samples = mu + res.samples @ chol.T
    # Interleave chains so truncation to n keeps every chain represented.
    samples = res.samples.transpose(1, 0, 2).reshape(-1, task.theta_dim)[:n]
    for g in task.symmetries:
        flip = rng.random(samples.shape[0]) < 0.5
        samples[flip] = g(samples[flip])
    return samples


__all__ = ["TASK_NAMES", "InvalidPolicy", "InvalidReport", "OracleError", "OracleUnavailable",
           "TaskSpec", "gaussian_linear_posterior", "invalid_mask", "make_task", "reference_posterior",
           "replace_invalid", "simulate_batch", "split_rhat"]
