"""Priors with exact densities, plus bijections from R^d onto bounded supports."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit, logit
from scipy.stats import norm


def _rows(theta, dim):
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[1] != dim:
        raise ValueError(f"theta has width {theta.shape[1]}, expected {dim}")
    return theta, single


class Prior:
    dim: int

    def log_prob(self, theta) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def support(self, theta) -> np.ndarray:
        """Boolean indicator of ``log_prob > -inf``."""
        raise NotImplementedError

    def marginal_cdf(self, dim: int):
        """Callable CDF of the ``dim``-th marginal (used by goodness-of-fit checks)."""
        raise NotImplementedError

    def bijection(self):
        raise NotImplementedError(f"{type(self).__name__} has no support bijection")


class BoxUniform(Prior):
    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("BoxUniform needs lower < upper elementwise")
        self.dim = self.lower.shape[0]
        self._log_density = -float(np.sum(np.log(self.upper - self.lower)))

    def __repr__(self):
        return f"BoxUniform({self.lower.tolist()}, {self.upper.tolist()})"

    def support(self, theta):
        theta, single = _rows(theta, self.dim)
        out = np.all((theta >= self.lower) & (theta <= self.upper), axis=1)
        return out[0] if single else out

    def log_prob(self, theta):
        theta, single = _rows(theta, self.dim)
        out = np.where(self.support(theta), self._log_density, -np.inf)
        return out[0] if single else out

    def sample(self, n, rng):
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def marginal_cdf(self, dim):
        lo, hi = self.lower[dim], self.upper[dim]
        return lambda t: np.clip((np.asarray(t) - lo) / (hi - lo), 0.0, 1.0)

    def bijection(self):
        return BoxBijection(self.lower, self.upper)


class DiagGaussian(Prior):
    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.std <= 0):
            raise ValueError("DiagGaussian needs positive std")
        self.dim = self.mean.shape[0]

    def __repr__(self):
        return f"DiagGaussian({self.mean.tolist()}, {self.std.tolist()})"

    def support(self, theta):
        theta, single = _rows(theta, self.dim)
        out = np.all(np.isfinite(theta), axis=1)
        return out[0] if single else out

    def log_prob(self, theta):
        theta, single = _rows(theta, self.dim)
        out = np.sum(norm.logpdf(theta, self.mean, self.std), axis=1)
        return out[0] if single else out

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def marginal_cdf(self, dim):
        return lambda t: norm.cdf(t, self.mean[dim], self.std[dim])


class UnionOfBoxes(Prior):
    """Uniform density over a union of disjoint boxes (weights proportional to volume)."""

    def __init__(self, boxes):
        self.boxes = [BoxUniform(lo, hi) for lo, hi in boxes]
        dims = {b.dim for b in self.boxes}
        if len(dims) != 1:
            raise ValueError("all boxes must share one dimension")
        self.dim = dims.pop()
        vols = np.array([np.prod(b.upper - b.lower) for b in self.boxes])
        self.weights = vols / vols.sum()
        self._log_density = -float(np.log(vols.sum()))
        for i, a in enumerate(self.boxes):
            for b in self.boxes[i + 1:]:
                if np.all((a.lower < b.upper) & (b.lower < a.upper)):
                    raise ValueError("boxes overlap")

    def __repr__(self):
        return f"UnionOfBoxes({[(b.lower.tolist(), b.upper.tolist()) for b in self.boxes]})"

    def support(self, theta):
        theta, single = _rows(theta, self.dim)
        out = np.zeros(theta.shape[0], dtype=bool)
        for b in self.boxes:
            out |= b.support(theta)
        return out[0] if single else out

    def log_prob(self, theta):
        theta, single = _rows(theta, self.dim)
        out = np.where(self.support(theta), self._log_density, -np.inf)
        return out[0] if single else out

    def sample(self, n, rng):
        which = rng.choice(len(self.boxes), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k, b in enumerate(self.boxes):
            idx = np.flatnonzero(which == k)
            out[idx] = b.sample(idx.size, rng)
        return out

    def marginal_cdf(self, dim):
        def cdf(t):
            t = np.asarray(t, dtype=np.float64)
            return sum(w * b.marginal_cdf(dim)(t) for w, b in zip(self.weights, self.boxes))
        return cdf

    def bijection(self):
        if self.dim != 1:
            raise NotImplementedError("support bijection only for one-dimensional unions")
        return IntervalUnionBijection([(b.lower[0], b.upper[0]) for b in self.boxes])


# ---------------------------------------------------------------------------
# Bijections R^d -> support
# ---------------------------------------------------------------------------


class BoxBijection:
    """theta = lower + (upper - lower) * sigmoid(u), per dimension."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        self.width = self.upper - self.lower

    def to_dict(self):
        return {"type": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def in_support(self, theta):
        return np.all((theta > self.lower) & (theta < self.upper), axis=1)

    def forward(self, u):
        return self.lower + self.width * expit(u)

    def inverse(self, theta):
        return logit((theta - self.lower) / self.width)

    def log_abs_det_inverse(self, theta):
        """log |du/dtheta| summed over dimensions."""
        u = self.inverse(theta)
        return -np.sum(np.log(self.width) + log_expit(u) + log_expit(-u), axis=1)


class IntervalUnionBijection:
    """R -> union of disjoint intervals.

    ``s = sigmoid(u)`` is split into consecutive pieces of (0, 1) whose lengths
    are proportional to the interval lengths; each piece maps affinely onto its
    interval. The map is a bijection onto the open intervals (discontinuous
    between pieces), with constant slope ``total_length`` in ``s``.
    """

    def __init__(self, intervals):
        iv = sorted((float(a), float(b)) for a, b in intervals)
        self.intervals = iv
        self.lengths = np.array([b - a for a, b in iv])
        self.total = float(self.lengths.sum())
        self.edges = np.concatenate([[0.0], np.cumsum(self.lengths) / self.total])
        self.lows = np.array([a for a, _ in iv])

    def to_dict(self):
        return {"type": "interval_union", "intervals": [list(i) for i in self.intervals]}

    def in_support(self, theta):
        t = theta[:, 0]
        out = np.zeros(t.shape[0], dtype=bool)
        for a, b in self.intervals:
            out |= (t > a) & (t < b)
        return out

    def forward(self, u):
        s = expit(u[:, 0])
        k = np.clip(np.searchsorted(self.edges, s, side="right") - 1, 0, len(self.intervals) - 1)
        return (self.lows[k] + (s - self.edges[k]) * self.total)[:, None]

    def inverse(self, theta):
        t = theta[:, 0]
        k = np.clip(np.searchsorted(self.lows, t, side="right") - 1, 0, len(self.intervals) - 1)
        s = self.edges[k] + (t - self.lows[k]) / self.total
        return logit(s)[:, None]

    def log_abs_det_inverse(self, theta):
        u = self.inverse(theta)[:, 0]
        return -(np.log(self.total) + log_expit(u) + log_expit(-u))


def bijection_from_dict(d: dict):
    if d["type"] == "box":
        return BoxBijection(d["lower"], d["upper"])
    if d["type"] == "interval_union":
        return IntervalUnionBijection(d["intervals"])
    raise ValueError(f"unknown bijection type {d['type']!r}")
