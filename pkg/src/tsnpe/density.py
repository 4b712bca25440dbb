"""Conditional density estimators q(theta | x) with exact log-density and sampling.

Two trainable backends share one training interface:

* :class:`MixtureDensityNetwork` -- Gaussian mixture with diagonal components
  whose parameters are produced by a dense trunk from standardized ``x``.
* :class:`AffineCouplingFlow` -- RealNVP-style stack of affine coupling layers
  conditioned on standardized ``x``, standard-normal base.

Trainable estimators expose ``forward_pass(theta, x) -> (log_prob, ctx)`` and
``backward_pass(ctx, coef) -> grads`` where ``grads`` is the gradient of
``sum(coef * log_prob)`` w.r.t. ``params()``. Training objectives (maximum
likelihood here, the atomic contrastive loss in :mod:`tsnpe.engine`) are built
on that pair.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp

from .ndcore import AdamState, DenseNetwork, NonFiniteError, adam_step, clip_by_global_norm

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
SCALE_FLOOR = 1e-4
STD_FLOOR = 1e-8


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or could not proceed."""


def _softplus(a):
    return np.logaddexp(0.0, a)


def _as_rows(a, width: int, name: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise ValueError(f"{name} has width {a.shape[-1]}, expected {width}")
    return a, single


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    theta_mean: np.ndarray
    theta_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray

    @classmethod
    def fit(cls, theta, x) -> "Standardizer":
        theta = np.asarray(theta, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        return cls(theta.mean(0), np.maximum(theta.std(0), STD_FLOOR),
                   x.mean(0), np.maximum(x.std(0), STD_FLOOR))

    @classmethod
    def identity(cls, theta_dim: int, x_dim: int) -> "Standardizer":
        return cls(np.zeros(theta_dim), np.ones(theta_dim), np.zeros(x_dim), np.ones(x_dim))

    def theta(self, theta):
        return (theta - self.theta_mean) / self.theta_std

    def theta_inverse(self, z):
        return z * self.theta_std + self.theta_mean

    def x(self, x):
        return (x - self.x_mean) / self.x_std

    @property
    def log_abs_det(self) -> float:
        """Added to a standardized-space log-density to get the original-space one."""
        return float(-np.sum(np.log(self.theta_std)))

    def arrays(self) -> list[np.ndarray]:
        return [self.theta_mean, self.theta_std, self.x_mean, self.x_std]


# ---------------------------------------------------------------------------
# Estimator base classes
# ---------------------------------------------------------------------------


class ConditionalEstimator:
    """Anything with ``log_prob(theta, x)`` and ``sample(x, n, rng)``."""

    theta_dim: int
    x_dim: int

    def log_prob(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def sample(self, x, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _prep(self, theta, x):
        theta, single = _as_rows(theta, self.theta_dim, "theta")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            if x.shape[0] != self.x_dim:
                raise ValueError(f"x has width {x.shape[0]}, expected {self.x_dim}")
        elif x.shape != (theta.shape[0], self.x_dim):
            raise ValueError(f"x has shape {x.shape}, expected {(theta.shape[0], self.x_dim)}")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(x))):
            raise ValueError("non-finite input to log_prob")
        return theta, x, single


class TrainableEstimator(ConditionalEstimator):
    standardizer: Standardizer | None

    def params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def networks(self) -> list[DenseNetwork]:
        raise NotImplementedError

    def forward_pass(self, theta, x):
        raise NotImplementedError

    def backward_pass(self, ctx, coef) -> list[np.ndarray]:
        raise NotImplementedError

    def fit_standardizer(self, theta, x) -> None:
        if self.standardizer is None:
            self.standardizer = Standardizer.fit(theta, x)

    def _require_fitted(self):
        if self.standardizer is None:
            raise RuntimeError("estimator has no fitted standardizer")

    def log_prob(self, theta, x) -> np.ndarray:
        self._require_fitted()
        theta, x, single = self._prep(theta, x)
        lp = self._log_prob(theta, x)
        return lp[0] if single else lp

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_state(self, state: list[np.ndarray]) -> None:
        for p, s in zip(self.params(), state):
            p[...] = s


# ---------------------------------------------------------------------------
# Mixture density network
# ---------------------------------------------------------------------------


class MixtureDensityNetwork(TrainableEstimator):
    """Mixture of ``components`` diagonal Gaussians over standardized theta."""

    kind = "mdn"

    def __init__(self, theta_dim: int, x_dim: int, components: int = 10, hidden: int = 50,
                 layers: int = 2, activation: str = "tanh", rng: np.random.Generator | None = None,
                 standardizer: Standardizer | None = None, net: DenseNetwork | None = None):
        self.theta_dim, self.x_dim = int(theta_dim), int(x_dim)
        self.components = int(components)
        self.hidden, self.n_layers, self.activation = int(hidden), int(layers), activation
        n_out = self.components * (1 + 2 * self.theta_dim)
        self.net = net if net is not None else DenseNetwork(
            [self.x_dim] + [self.hidden] * self.n_layers + [n_out], activation, rng)
        self.standardizer = standardizer

    def architecture(self) -> dict:
        return {"kind": self.kind, "theta_dim": self.theta_dim, "x_dim": self.x_dim,
                "components": self.components, "hidden": self.hidden, "layers": self.n_layers,
                "activation": self.activation}

    def params(self):
        return self.net.params()

    def networks(self):
        return [self.net]

    def _heads(self, out):
        c, d = self.components, self.theta_dim
        logits = out[:, :c]
        means = out[:, c:c + c * d].reshape(-1, c, d)
        raw = out[:, c + c * d:].reshape(-1, c, d)
        return logits, means, raw

    def _mixture(self, xs):
        out, cache = self.net.forward_cached(xs)
        logits, means, raw = self._heads(out)
        log_w = logits - logsumexp(logits, axis=1, keepdims=True)
        scales = _softplus(raw) + SCALE_FLOOR
        return log_w, means, raw, scales, cache

    def _components_lp(self, z, log_w, means, scales):
        diff = (z[:, None, :] - means) / scales
        comp = log_w + np.sum(-0.5 * diff * diff - np.log(scales), axis=2) - 0.5 * self.theta_dim * _LOG_2PI
        return comp, diff

    def _log_prob(self, theta, x):
        std = self.standardizer
        z = std.theta(theta)
        xs = std.x(x)
        if xs.ndim == 1:
            log_w, means, _, scales, _ = self._mixture(xs[None, :])
        else:
            log_w, means, _, scales, _ = self._mixture(xs)
        comp, _ = self._components_lp(z, log_w, means, scales)
        return logsumexp(comp, axis=1) + std.log_abs_det

    def forward_pass(self, theta, x):
        self._require_fitted()
        std = self.standardizer
        theta = np.asarray(theta, dtype=np.float64)
        z = std.theta(theta)
        xs = std.x(np.broadcast_to(np.asarray(x, dtype=np.float64), (theta.shape[0], self.x_dim)))
        log_w, means, raw, scales, cache = self._mixture(xs)
        comp, diff = self._components_lp(z, log_w, means, scales)
        lp_z = logsumexp(comp, axis=1)
        ctx = (xs, cache, log_w, raw, scales, comp, diff, lp_z)
        return lp_z + std.log_abs_det, ctx

    def backward_pass(self, ctx, coef):
        xs, cache, log_w, raw, scales, comp, diff, lp_z = ctx
        n = xs.shape[0]
        coef = np.asarray(coef, dtype=np.float64).reshape(n, 1)
        resp = np.exp(comp - lp_z[:, None])
        d_logits = coef * (resp - np.exp(log_w))
        rc = (coef * resp)[:, :, None]
        d_means = rc * diff / scales
        d_raw = rc * (diff * diff - 1.0) / scales * expit(raw)
        adjoint = np.concatenate([d_logits, d_means.reshape(n, -1), d_raw.reshape(n, -1)], axis=1)
        return self.net.backward(xs, adjoint, cache).params

    def sample(self, x, n: int, rng: np.random.Generator) -> np.ndarray:
        self._require_fitted()
        x = np.asarray(x, dtype=np.float64).reshape(self.x_dim)
        std = self.standardizer
        log_w, means, _, scales, _ = self._mixture(std.x(x)[None, :])
        w = np.exp(log_w[0])
        idx = np.minimum(np.searchsorted(np.cumsum(w), rng.random(n) * w.sum()), self.components - 1)
        z = means[0][idx] + scales[0][idx] * rng.standard_normal((n, self.theta_dim))
        return std.theta_inverse(z)


# ---------------------------------------------------------------------------
# Affine coupling flow
# ---------------------------------------------------------------------------


class AffineCouplingFlow(TrainableEstimator):
    """Stack of conditional affine coupling layers on standardized theta.

    Layer ``l`` permutes the dimensions with a fixed permutation, keeps the
    masked half ``a`` and maps the other half ``b -> b * exp(s) + t`` with
    ``(s, t)`` computed from ``(a, x)``; ``s`` is soft-clamped to
    ``(-scale_clamp, scale_clamp)``. In one dimension every layer conditions on
    ``x`` only, so the flow reduces to a conditional Gaussian.
    """

    kind = "flow"

    def __init__(self, theta_dim: int, x_dim: int, layers: int = 5, hidden: int = 50,
                 activation: str = "tanh", rng: np.random.Generator | None = None,
                 standardizer: Standardizer | None = None, scale_clamp: float = 3.0,
                 perms: list | None = None, nets: list[DenseNetwork] | None = None):
        self.theta_dim, self.x_dim = int(theta_dim), int(x_dim)
        self.n_layers, self.hidden, self.activation = int(layers), int(hidden), activation
        self.scale_clamp = float(scale_clamp)
        self.standardizer = standardizer
        rng = np.random.default_rng(0) if rng is None else rng
        d = self.theta_dim
        if perms is None:
            perms = [np.arange(d)] + [rng.permutation(d) for _ in range(self.n_layers - 1)]
        self.perms = [np.asarray(p, dtype=np.int64) for p in perms]
        self.masks = []
        for l in range(self.n_layers):
            if d == 1:
                self.masks.append(np.array([False]))
            else:
                self.masks.append((np.arange(d) + l) % 2 == 0)
        if nets is None:
            nets = []
            for m in self.masks:
                n_cond, n_tr = int(m.sum()), int((~m).sum())
                nets.append(DenseNetwork([n_cond + self.x_dim, self.hidden, self.hidden, 2 * n_tr],
                                         activation, rng))
        self.nets = nets

    def architecture(self) -> dict:
        return {"kind": self.kind, "theta_dim": self.theta_dim, "x_dim": self.x_dim,
                "layers": self.n_layers, "hidden": self.hidden, "activation": self.activation,
                "scale_clamp": self.scale_clamp, "perms": [p.tolist() for p in self.perms]}

    def params(self):
        return [p for net in self.nets for p in net.params()]

    def networks(self):
        return list(self.nets)

    def _conditioner(self, l, a, xs):
        inp = np.concatenate([a, np.broadcast_to(xs, (a.shape[0], self.x_dim))], axis=1)
        out, cache = self.nets[l].forward_cached(inp)
        nb = out.shape[1] // 2
        s = self.scale_clamp * np.tanh(out[:, :nb] / self.scale_clamp)
        return inp, cache, s, out[:, nb:]

    def normalize(self, z, xs, keep=False):
        """Map standardized theta to base space; returns (u, log|det|, caches)."""
        y = z
        logdet = np.zeros(z.shape[0])
        caches = []
        for l in range(self.n_layers):
            y = y[:, self.perms[l]]
            m = self.masks[l]
            a, b = y[:, m], y[:, ~m]
            inp, cache, s, t = self._conditioner(l, a, xs)
            out = np.empty_like(y)
            out[:, m] = a
            out[:, ~m] = b * np.exp(s) + t
            logdet += s.sum(axis=1)
            if keep:
                caches.append((inp, cache, b, s))
            y = out
        return y, logdet, caches

    def generate(self, u, xs):
        """Map base samples to standardized theta; returns (z, log|det| of normalize at z)."""
        y = u
        logdet = np.zeros(u.shape[0])
        for l in range(self.n_layers - 1, -1, -1):
            m = self.masks[l]
            a = y[:, m]
            _, _, s, t = self._conditioner(l, a, xs)
            prev = np.empty_like(y)
            prev[:, m] = a
            prev[:, ~m] = (y[:, ~m] - t) * np.exp(-s)
            logdet += s.sum(axis=1)
            y = np.empty_like(prev)
            y[:, self.perms[l]] = prev
        return y, logdet

    @staticmethod
    def _base_lp(u):
        return -0.5 * np.sum(u * u, axis=1) - 0.5 * u.shape[1] * _LOG_2PI

    def _log_prob(self, theta, x):
        std = self.standardizer
        xs = std.x(x)
        if xs.ndim == 1:
            xs = xs[None, :]
        u, logdet, _ = self.normalize(std.theta(theta), xs)
        return self._base_lp(u) + logdet + std.log_abs_det

    def forward_pass(self, theta, x):
        self._require_fitted()
        std = self.standardizer
        xs = std.x(np.asarray(x, dtype=np.float64))
        u, logdet, caches = self.normalize(std.theta(np.asarray(theta, dtype=np.float64)), xs, keep=True)
        return self._base_lp(u) + logdet + std.log_abs_det, (u, caches)

    def backward_pass(self, ctx, coef):
        u, caches = ctx
        coef = np.asarray(coef, dtype=np.float64).reshape(-1, 1)
        g = -coef * u
        grads: list[list[np.ndarray]] = [None] * self.n_layers  # type: ignore[list-item]
        for l in range(self.n_layers - 1, -1, -1):
            inp, cache, b, s = caches[l]
            m = self.masks[l]
            na = int(m.sum())
            g_out_b = g[:, ~m]
            es = np.exp(s)
            d_s = g_out_b * b * es + coef
            d_raw = d_s * (1.0 - (s / self.scale_clamp) ** 2)
            res = self.nets[l].backward(inp, np.concatenate([d_raw, g_out_b], axis=1), cache)
            grads[l] = res.params
            gy = np.empty_like(g)
            gy[:, m] = g[:, m] + res.input[:, :na]
            gy[:, ~m] = g_out_b * es
            g = np.empty_like(gy)
            g[:, self.perms[l]] = gy
        return [p for layer_grads in grads for p in layer_grads]

    def sample(self, x, n: int, rng: np.random.Generator) -> np.ndarray:
        theta, _ = self.sample_and_log_prob(x, n, rng)
        return theta

    def sample_and_log_prob(self, x, n: int, rng: np.random.Generator):
        """Draws plus their log-density, computed along the sampling direction."""
        self._require_fitted()
        std = self.standardizer
        xs = std.x(np.asarray(x, dtype=np.float64).reshape(self.x_dim))[None, :]
        u = rng.standard_normal((n, self.theta_dim))
        z, logdet = self.generate(u, xs)
        return std.theta_inverse(z), self._base_lp(u) + logdet + std.log_abs_det


# ---------------------------------------------------------------------------
# Non-trainable estimators and wrappers
# ---------------------------------------------------------------------------


class GaussianEstimator(ConditionalEstimator):
    """Diagonal Gaussian with x-dependent mean and standard deviation.

    ``mean_fn`` and ``std_fn`` take an ``(n, x_dim)`` array and return
    ``(n, theta_dim)`` arrays. Used for analytic posteriors and test fixtures.
    """

    kind = "gaussian"

    def __init__(self, theta_dim: int, x_dim: int, mean_fn: Callable, std_fn: Callable):
        self.theta_dim, self.x_dim = int(theta_dim), int(x_dim)
        self.mean_fn, self.std_fn = mean_fn, std_fn

    @classmethod
    def fixed(cls, mean, std, x_dim: int = 1) -> "GaussianEstimator":
        """An x-independent Gaussian."""
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape).copy()
        return cls(mean.shape[0], x_dim,
                   lambda x: np.broadcast_to(mean, (x.shape[0], mean.shape[0])),
                   lambda x: np.broadcast_to(std, (x.shape[0], mean.shape[0])))

    def _moments(self, x, n):
        x2 = np.atleast_2d(x)
        return self.mean_fn(x2), self.std_fn(x2)

    def log_prob(self, theta, x):
        theta, x, single = self._prep(theta, x)
        mu, sd = self._moments(x, theta.shape[0])
        z = (theta - mu) / sd
        lp = np.sum(-0.5 * z * z - np.log(sd), axis=1) - 0.5 * self.theta_dim * _LOG_2PI
        return lp[0] if single else lp

    def sample(self, x, n, rng):
        x = np.asarray(x, dtype=np.float64).reshape(1, self.x_dim)
        mu, sd = self._moments(x, 1)
        return mu + sd * rng.standard_normal((n, self.theta_dim))


class Ensemble(TrainableEstimator):
    """Uniform mixture of independently trained members."""

    kind = "ensemble"

    def __init__(self, members: list[TrainableEstimator]):
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = list(members)
        self.theta_dim, self.x_dim = members[0].theta_dim, members[0].x_dim

    @property
    def standardizer(self):
        return self.members[0].standardizer

    def architecture(self) -> dict:
        return {"kind": self.kind, "members": [m.architecture() for m in self.members]}

    def params(self):
        return [p for m in self.members for p in m.params()]

    def networks(self):
        return [n for m in self.members for n in m.networks()]

    def fit_standardizer(self, theta, x):
        for m in self.members:
            m.fit_standardizer(theta, x)

    def log_prob(self, theta, x):
        lps = np.stack([np.atleast_1d(m.log_prob(theta, x)) for m in self.members])
        lp = logsumexp(lps, axis=0) - np.log(len(self.members))
        return lp[0] if np.asarray(theta).ndim == 1 else lp

    def sample(self, x, n, rng):
        which = rng.integers(len(self.members), size=n)
        out = np.empty((n, self.theta_dim))
        for k, member in enumerate(self.members):
            idx = np.flatnonzero(which == k)
            if idx.size:
                out[idx] = member.sample(x, idx.size, rng)
        return out


class TransformedEstimator(TrainableEstimator):
    """Base estimator living in an unconstrained space mapped onto the prior support.

    ``theta = bijection.forward(u)``; the log-density picks up the log-Jacobian of
    the inverse map, so samples can never leave the support.
    """

    kind = "transformed"

    def __init__(self, base: TrainableEstimator, bijection):
        self.base, self.bijection = base, bijection
        self.theta_dim, self.x_dim = base.theta_dim, base.x_dim

    @property
    def standardizer(self):
        return self.base.standardizer

    def architecture(self) -> dict:
        return {"kind": self.kind, "base": self.base.architecture(), "bijection": self.bijection.to_dict()}

    def params(self):
        return self.base.params()

    def networks(self):
        return self.base.networks()

    def fit_standardizer(self, theta, x):
        self.base.fit_standardizer(self.bijection.inverse(np.asarray(theta, dtype=np.float64)), x)

    def log_prob(self, theta, x):
        theta, x, single = self._prep(theta, x)
        inside = self.bijection.in_support(theta)
        lp = np.full(theta.shape[0], -np.inf)
        if inside.any():
            t = theta[inside]
            xx = x if x.ndim == 1 else x[inside]
            u = self.bijection.inverse(t)
            lp[inside] = np.atleast_1d(self.base.log_prob(u, xx)) + self.bijection.log_abs_det_inverse(t)
        return lp[0] if single else lp

    def forward_pass(self, theta, x):
        theta = np.asarray(theta, dtype=np.float64)
        u = self.bijection.inverse(theta)
        lp, ctx = self.base.forward_pass(u, x)
        return lp + self.bijection.log_abs_det_inverse(theta), ctx

    def backward_pass(self, ctx, coef):
        return self.base.backward_pass(ctx, coef)

    def sample(self, x, n, rng):
        return self.bijection.forward(self.base.sample(x, n, rng))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 200
    learning_rate: float = 5e-4
    max_epochs: int = 300
    validation_fraction: float = 0.1
    patience: int = 20
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class MaximumLikelihood:
    """Mean negative log-likelihood."""

    def loss(self, est, theta, x, rng=None) -> float:
        lp, _ = est.forward_pass(theta, x)
        return float(-np.mean(lp))

    def loss_and_grad(self, est, theta, x, rng=None):
        lp, ctx = est.forward_pass(theta, x)
        n = lp.shape[0]
        return float(-np.mean(lp)), est.backward_pass(ctx, np.full(n, -1.0 / n))


def fit(est: TrainableEstimator, theta, x, cfg: TrainConfig, objective=None) -> tuple[TrainableEstimator, list[dict]]:
    """Train ``est`` in place with Adam and early stopping.

    Returns the estimator (restored to its best-validation parameters) and the
    training log: one ``{"epoch", "train_loss", "val_loss"}`` record per epoch,
    with epoch 0 holding the initial validation loss.
    """
    if isinstance(est, Ensemble):
        return _fit_ensemble(est, theta, x, cfg, objective)
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = theta.shape[0]
    if n < 2 * cfg.batch_size:
        raise ValueError(f"need at least {2 * cfg.batch_size} training pairs, got {n}")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(x))):
        raise ValueError("training data contains non-finite values; replace invalid entries first")
    objective = objective or MaximumLikelihood()
    est.fit_standardizer(theta, x)

    rng = np.random.default_rng(cfg.seed)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    th_val, x_val = theta[val_idx], x[val_idx]
    val_seed = int(rng.integers(2 ** 63))

    def val_loss():
        return objective.loss(est, th_val, x_val, np.random.default_rng(val_seed))

    best = val_loss()
    if not np.isfinite(best):
        raise TrainingError("non-finite validation loss at initialization")
    best_state = est.get_state()
    history = [{"epoch": 0, "train_loss": None, "val_loss": best}]
    params = est.params()
    state = AdamState.for_params(params, lr=cfg.learning_rate)
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = objective.loss_and_grad(est, theta[idx], x[idx], rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b} "
                                    f"(rows {idx[:5].tolist()}...)")
            clip_by_global_norm(grads, cfg.clip_norm)
            try:
                adam_step(params, grads, state)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * idx.size
            count += idx.size
        current = val_loss()
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": current})
        if current < best:
            best, best_state, wait = current, est.get_state(), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    est.set_state(best_state)
    log.debug("fit finished after %d epochs, best val loss %.4f", len(history) - 1, best)
    return est, history


def _fit_ensemble(ens: Ensemble, theta, x, cfg: TrainConfig, objective):
    logs = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(ens.members))
    for k, member in enumerate(ens.members):
        member_cfg = TrainConfig(**{**asdict(cfg), "seed": int(seeds[k].generate_state(1)[0])})
        _, history = fit(member, theta, x, member_cfg, objective)
        logs.extend({"member": k, **rec} for rec in history)
    return ens, logs


def validation_nll(history: list[dict]) -> float:
    """Best validation loss recorded in a training log."""
    vals = [h["val_loss"] for h in history if h.get("val_loss") is not None]
    return float(min(vals))


# ---------------------------------------------------------------------------
# Construction and serialization
# ---------------------------------------------------------------------------


def build_estimator(backend: str, theta_dim: int, x_dim: int, rng: np.random.Generator,
                    components: int = 10, layers: int | None = None, hidden: int = 50,
                    activation: str = "tanh", ensemble_size: int = 1,
                    standardizer: Standardizer | None = None, bijection=None) -> TrainableEstimator:
    """Fresh estimator for ``backend`` in {"mdn", "flow"}."""
    seeds = rng.integers(2 ** 63, size=ensemble_size)

    def one(seed):
        r = np.random.default_rng(int(seed))
        std = None if standardizer is None else Standardizer(*[a.copy() for a in standardizer.arrays()])
        if backend == "mdn":
            est = MixtureDensityNetwork(theta_dim, x_dim, components, hidden, layers or 2,
                                        activation, r, std)
        elif backend == "flow":
            est = AffineCouplingFlow(theta_dim, x_dim, layers or 5, hidden, activation, r, std)
        else:
            raise ValueError(f"unknown density backend {backend!r}")
        return TransformedEstimator(est, bijection) if bijection is not None else est

    if ensemble_size == 1:
        return one(seeds[0])
    return Ensemble([one(s) for s in seeds])


EST_MAGIC = b"TSNPEEST"
EST_VERSION = 1


def _flatten(est) -> list[TrainableEstimator]:
    if isinstance(est, Ensemble):
        return [leaf for m in est.members for leaf in _flatten(m)]
    if isinstance(est, TransformedEstimator):
        return _flatten(est.base)
    return [est]


def estimator_to_bytes(est: TrainableEstimator) -> bytes:
    """Serialize: magic, version, JSON architecture header, then per leaf
    estimator its standardizer arrays followed by its networks."""
    header = json.dumps(est.architecture(), sort_keys=True).encode()
    parts = [EST_MAGIC, struct.pack("<II", EST_VERSION, len(header)), header]
    for leaf in _flatten(est):
        leaf._require_fitted()
        for a in leaf.standardizer.arrays():
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        for net in leaf.networks():
            parts.append(net.to_bytes())
    return b"".join(parts)


def estimator_from_bytes(buf: bytes) -> TrainableEstimator:
    if buf[:8] != EST_MAGIC:
        raise ValueError("bad estimator magic")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != EST_VERSION:
        raise ValueError(f"unsupported estimator version {version}")
    arch = json.loads(buf[16:16 + hlen].decode())
    pos = 16 + hlen

    def read_arrays(sizes):
        nonlocal pos
        out = []
        for s in sizes:
            out.append(np.frombuffer(buf, dtype="<f8", count=s, offset=pos).astype(np.float64))
            pos += 8 * s
        return out

    def read_net():
        nonlocal pos
        net, pos = DenseNetwork.from_bytes(buf, pos)
        return net

    def build(a):
        kind = a["kind"]
        if kind == "ensemble":
            return Ensemble([build(m) for m in a["members"]])
        if kind == "transformed":
            from .tasks.priors import bijection_from_dict
            return TransformedEstimator(build(a["base"]), bijection_from_dict(a["bijection"]))
        d, dx = a["theta_dim"], a["x_dim"]
        std = Standardizer(*read_arrays([d, d, dx, dx]))
        if kind == "mdn":
            return MixtureDensityNetwork(d, dx, a["components"], a["hidden"], a["layers"],
                                         a["activation"], standardizer=std, net=read_net())
        if kind == "flow":
            nets = [read_net() for _ in range(a["layers"])]
            return AffineCouplingFlow(d, dx, a["layers"], a["hidden"], a["activation"],
                                      standardizer=std, scale_clamp=a["scale_clamp"],
                                      perms=a["perms"], nets=nets)
        raise ValueError(f"unknown estimator kind {kind!r}")

    return build(arch)


def save_estimator(est, path) -> None:
    Path(path).write_bytes(estimator_to_bytes(est))


def load_estimator(path) -> TrainableEstimator:
    return estimator_from_bytes(Path(path).read_bytes())
