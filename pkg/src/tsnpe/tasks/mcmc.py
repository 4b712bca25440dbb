"""Coordinate-wise slice sampling, vectorized across independent chains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OracleError(RuntimeError):
    """A reference-posterior sampler failed its convergence check."""


@dataclass
class ChainResult:
    samples: np.ndarray  # (n_chains, n_kept, d)
    log_density: np.ndarray  # (n_chains, n_kept)
    rhat: float


def split_rhat(traces: np.ndarray) -> float:
    """Split-R-hat of scalar traces with shape (chains, draws)."""
    traces = np.asarray(traces, dtype=np.float64)
    n = traces.shape[1] // 2
    if n < 2:
        raise ValueError("need at least 4 draws per chain")
    halves = np.concatenate([traces[:, :n], traces[:, n:2 * n]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def slice_sample(log_density, init: np.ndarray, n_keep: int, rng: np.random.Generator,
                 widths=None, burn: int = 200, thin: int = 1, max_steps: int = 50) -> ChainResult:
    """Univariate slice sampling with stepping out, one coordinate at a time.

    ``log_density`` maps an ``(n_chains, d)`` array to ``(n_chains,)`` values
    (``-inf`` outside the support). Every chain must start at finite density.
    """
    x = np.array(init, dtype=np.float64)
    c, d = x.shape
    lp = log_density(x)
    if not np.all(np.isfinite(lp)):
        raise OracleError("initial chain states must have finite log-density")
    widths = np.ones(d) if widths is None else np.broadcast_to(np.asarray(widths, dtype=np.float64), (d,))
    total = burn + n_keep * thin
    out = np.empty((c, n_keep, d))
    out_lp = np.empty((c, n_keep))
    rows = np.arange(c)

    def at(j, values):
        y = x.copy()
        y[:, j] = values
        return log_density(y)

    for it in range(total):
        for j in range(d):
            level = lp + np.log(rng.random(c))
            w = widths[j]
            left = x[:, j] - w * rng.random(c)
            right = left + w
            grow = np.ones(c, dtype=bool)
            for _ in range(max_steps):
                grow &= at(j, left) > level
                if not grow.any():
                    break
                left = np.where(grow, left - w, left)
            grow = np.ones(c, dtype=bool)
            for _ in range(max_steps):
                grow &= at(j, right) > level
                if not grow.any():
                    break
                right = np.where(grow, right + w, right)
            active = np.ones(c, dtype=bool)
            current = x[:, j].copy()
            new = current.copy()
            for _ in range(200):
                prop = left + rng.random(c) * (right - left)
                lpp = at(j, prop)
                acc = active & (lpp > level)
                new[acc] = prop[acc]
                lp[acc] = lpp[acc]
                rej = active & ~acc
                below = rej & (prop < current)
                left = np.where(below, prop, left)
                right = np.where(rej & ~below, prop, right)
                active = rej
                if not active.any():
                    break
            else:
                raise OracleError("slice shrinkage did not terminate")
            x[:, j] = new
        k = it - burn
        if k >= 0 and k % thin == 0:
            out[rows, k // thin] = x
            out_lp[:, k // thin] = lp
    return ChainResult(out, out_lp, split_rhat(out_lp))


def sir_initialize(log_target, sample_prior, n_chains: int, rng: np.random.Generator,
                   n_candidates: int = 20_000) -> np.ndarray:
    """Chain starting points resampled from prior draws by likelihood weight."""
    cand = sample_prior(n_candidates, rng)
    lw = log_target(cand)
    finite = np.isfinite(lw)
    if not finite.any():
        raise OracleError("no prior draw has finite posterior density")
    w = np.exp(lw[finite] - lw[finite].max())
    idx = rng.choice(np.flatnonzero(finite), size=n_chains, p=w / w.sum())
    return cand[idx]
