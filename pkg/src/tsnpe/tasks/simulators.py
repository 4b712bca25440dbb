"""Simulators. Each one splits into per-row noise draws and a vectorized,
deterministic ``transform(theta, noise)`` so that batches can be sharded over
workers without changing results."""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy.special import expit
from scipy.stats import norm

from . import constants as C


class Simulator:
    name: str
    theta_dim: int
    x_dim: int
    noise_dim: int

    def noise(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def transform(self, theta: np.ndarray, noise: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, theta, rng: np.random.Generator) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64).reshape(1, self.theta_dim)
        return self.transform(theta, self.noise(rng)[None, :])[0]

    def log_likelihood(self, theta, x) -> np.ndarray:
        """log p(x | theta) for each row of theta; ``None`` means intractable."""
        raise NotImplementedError


class Toy1D(Simulator):
    name, theta_dim, x_dim, noise_dim = "toy1d", 1, 1, 1

    def __init__(self, noise_std=C.TOY1D["noise_std"]):
        self.noise_std = noise_std

    def noise(self, rng):
        return rng.standard_normal(1)

    def transform(self, theta, noise):
        return theta ** 2 + self.noise_std * noise

    def log_likelihood(self, theta, x):
        return norm.logpdf(x[0], theta[:, 0] ** 2, self.noise_std)


class LinearGaussian(Simulator):
    """x = theta + N(0, noise_std^2 I)."""

    def __init__(self, dim, noise_std, name):
        self.name, self.theta_dim, self.x_dim, self.noise_dim = name, dim, dim, dim
        self.noise_std = float(noise_std)

    def noise(self, rng):
        return rng.standard_normal(self.theta_dim)

    def transform(self, theta, noise):
        return theta + self.noise_std * noise

    def log_likelihood(self, theta, x):
        return np.sum(norm.logpdf(x, theta, self.noise_std), axis=1)


class TwoMoons(Simulator):
    name, theta_dim, x_dim, noise_dim = "two_moons", 2, 2, 2

    def __init__(self, cfg=C.TWO_MOONS):
        self.cfg = cfg

    def noise(self, rng):
        return np.array([rng.random(), rng.standard_normal()])

    def _shift(self, theta):
        s2 = np.sqrt(2.0)
        return np.stack([-np.abs(theta[:, 0] + theta[:, 1]) / s2,
                         (-theta[:, 0] + theta[:, 1]) / s2], axis=1)

    def transform(self, theta, noise):
        c = self.cfg
        a = c["angle_low"] + (c["angle_high"] - c["angle_low"]) * noise[:, 0]
        r = c["radius_mean"] + c["radius_std"] * noise[:, 1]
        p = np.stack([r * np.cos(a) + c["offset"], r * np.sin(a)], axis=1)
        return p + self._shift(theta)

    def log_likelihood(self, theta, x):
        c = self.cfg
        p = x[None, :] - self._shift(theta)
        p0 = p[:, 0] - c["offset"]
        r = np.hypot(p0, p[:, 1])
        # Density of (r, a) is N(r) * U(a); change of variables to Cartesian adds -log r.
        out = norm.logpdf(r, c["radius_mean"], c["radius_std"]) - np.log(c["angle_high"] - c["angle_low"]) - np.log(r)
        return np.where(p0 > 0.0, out, -np.inf)


class SLCP(Simulator):
    name, theta_dim = "slcp", 5

    def __init__(self, cfg=C.SLCP):
        self.n_draws = cfg["n_draws"]
        self.x_dim = 2 * self.n_draws
        self.noise_dim = 2 * self.n_draws

    def noise(self, rng):
        return rng.standard_normal(self.noise_dim)

    @staticmethod
    def _moments(theta):
        m = theta[:, :2]
        s1, s2 = theta[:, 2] ** 2, theta[:, 3] ** 2
        rho = np.tanh(theta[:, 4])
        return m, s1, s2, rho

    def transform(self, theta, noise):
        m, s1, s2, rho = self._moments(theta)
        out = np.empty((theta.shape[0], self.x_dim))
        for k in range(self.n_draws):
            e1, e2 = noise[:, 2 * k], noise[:, 2 * k + 1]
            out[:, 2 * k] = m[:, 0] + s1 * e1
            out[:, 2 * k + 1] = m[:, 1] + s2 * (rho * e1 + np.sqrt(1.0 - rho ** 2) * e2)
        return out

    def log_likelihood(self, theta, x):
        m, s1, s2, rho = self._moments(theta)
        total = np.zeros(theta.shape[0])
        one_m_r2 = np.maximum(1.0 - rho ** 2, 1e-300)
        for k in range(self.n_draws):
            z1 = (x[2 * k] - m[:, 0]) / s1
            z2 = (x[2 * k + 1] - m[:, 1]) / s2
            q = (z1 ** 2 - 2 * rho * z1 * z2 + z2 ** 2) / one_m_r2
            total += -0.5 * q - np.log(2 * np.pi * s1 * s2) - 0.5 * np.log(one_m_r2)
        return np.where(np.isfinite(total), total, -np.inf)


class BernoulliGLM(Simulator):
    """Bernoulli GLM with sufficient summaries [sum y, V^T y]."""

    name = "bernoulli_glm"

    def __init__(self, cfg=C.BERNOULLI_GLM):
        self.n_steps, self.n_filter = cfg["n_steps"], cfg["n_filter"]
        self.theta_dim = self.x_dim = 1 + self.n_filter
        self.noise_dim = self.n_steps
        rng = np.random.default_rng(cfg["design_seed"])
        self.design = np.concatenate([np.ones((self.n_steps, 1)),
                                      rng.standard_normal((self.n_steps, self.n_filter))], axis=1)

    def noise(self, rng):
        return rng.random(self.n_steps)

    def transform(self, theta, noise):
        # einsum keeps each row's reduction order independent of the batch
        # size, unlike BLAS matmul, so sharded batches stay bit-identical
        p = expit(np.einsum("nk,tk->nt", theta, self.design))
        y = (noise < p).astype(np.float64)
        return np.einsum("nt,tk->nk", y, self.design)

    def log_likelihood(self, theta, x):
        eta = theta @ self.design.T
        return theta @ x - np.sum(np.logaddexp(0.0, eta), axis=1)


# ---------------------------------------------------------------------------
# ODE models, integrated with classical RK4 at a fixed step
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _lv_rhs(a, b, g, d, x, y):
    return a * x - b * x * y, -g * y + d * x * y


@njit(cache=True, nogil=True)
def lotka_volterra_rk4(rates, x0, y0, dt, n_steps, obs_every):
    n = rates.shape[0]
    n_obs = n_steps // obs_every
    out = np.empty((n, 2, n_obs))
    for i in range(n):
        a, b, g, d = rates[i, 0], rates[i, 1], rates[i, 2], rates[i, 3]
        x, y = x0, y0
        k = 0
        for step in range(1, n_steps + 1):
            k1x, k1y = _lv_rhs(a, b, g, d, x, y)
            k2x, k2y = _lv_rhs(a, b, g, d, x + 0.5 * dt * k1x, y + 0.5 * dt * k1y)
            k3x, k3y = _lv_rhs(a, b, g, d, x + 0.5 * dt * k2x, y + 0.5 * dt * k2y)
            k4x, k4y = _lv_rhs(a, b, g, d, x + dt * k3x, y + dt * k3y)
            x += dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            y += dt / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
            if step % obs_every == 0:
                out[i, 0, k] = x
                out[i, 1, k] = y
                k += 1
    return out


@njit(cache=True, nogil=True)
def _sir_rhs(beta, gamma, s, i):
    inf = beta * s * i
    return -inf, inf - gamma * i


@njit(cache=True, nogil=True)
def sir_rk4(rates, s0, i0, dt, n_steps, obs_every):
    n = rates.shape[0]
    n_obs = n_steps // obs_every
    out = np.empty((n, n_obs))
    for j in range(n):
        beta, gamma = rates[j, 0], rates[j, 1]
        s, i = s0, i0
        k = 0
        for step in range(1, n_steps + 1):
            k1s, k1i = _sir_rhs(beta, gamma, s, i)
            k2s, k2i = _sir_rhs(beta, gamma, s + 0.5 * dt * k1s, i + 0.5 * dt * k1i)
            k3s, k3i = _sir_rhs(beta, gamma, s + 0.5 * dt * k2s, i + 0.5 * dt * k2i)
            k4s, k4i = _sir_rhs(beta, gamma, s + dt * k3s, i + dt * k3i)
            s += dt / 6.0 * (k1s + 2 * k2s + 2 * k3s + k4s)
            i += dt / 6.0 * (k1i + 2 * k2i + 2 * k3i + k4i)
            if step % obs_every == 0:
                out[j, k] = i
                k += 1
    return out


def _steps(t_end, n_obs, dt):
    n_steps = int(round(t_end / dt))
    obs_every = n_steps // n_obs
    if obs_every * n_obs != n_steps or abs(n_steps * dt - t_end) > 1e-9:
        raise ValueError("dt must divide the observation interval")
    return n_steps, obs_every


class LotkaVolterra(Simulator):
    """Deterministic predator-prey ODE with Gaussian noise on log populations."""

    name, theta_dim = "lotka_volterra", 4

    def __init__(self, cfg=C.LOTKA_VOLTERRA):
        self.cfg = dict(cfg)
        self.x_dim = self.noise_dim = 2 * cfg["n_obs"]

    def trajectories(self, theta, dt=None):
        c = self.cfg
        n_steps, every = _steps(c["t_end"], c["n_obs"], dt or c["dt"])
        rates = np.exp(np.ascontiguousarray(theta, dtype=np.float64))
        x0, y0 = c["initial_state"]
        with np.errstate(all="ignore"):
            states = lotka_volterra_rk4(rates, float(x0), float(y0), float(dt or c["dt"]), n_steps, every)
        return states.reshape(theta.shape[0], -1)

    def summaries(self, theta, dt=None):
        states = self.trajectories(theta, dt)
        with np.errstate(all="ignore"):
            return np.where(states > 0, np.log(np.where(states > 0, states, 1.0)), np.nan)

    def noise(self, rng):
        return rng.standard_normal(self.noise_dim)

    def transform(self, theta, noise):
        return self.summaries(theta) + self.cfg["noise_std"] * noise

    def log_likelihood(self, theta, x):
        mean = self.summaries(theta)
        out = np.sum(norm.logpdf(x[None, :], mean, self.cfg["noise_std"]), axis=1)
        return np.where(np.isfinite(out), out, -np.inf)


class SIREpidemic(Simulator):
    """Deterministic SIR ODE (population fractions) with Gaussian noise on the infected fraction."""

    name, theta_dim = "sir_epidemic", 2

    def __init__(self, cfg=C.SIR_EPIDEMIC):
        self.cfg = dict(cfg)
        self.x_dim = self.noise_dim = cfg["n_obs"]

    def summaries(self, theta, dt=None):
        c = self.cfg
        n_steps, every = _steps(c["t_end"], c["n_obs"], dt or c["dt"])
        rates = np.exp(np.ascontiguousarray(theta, dtype=np.float64))
        i0 = c["initial_infected"] / c["population"]
        with np.errstate(all="ignore"):
            return sir_rk4(rates, 1.0 - i0, i0, float(dt or c["dt"]), n_steps, every)

    def noise(self, rng):
        return rng.standard_normal(self.noise_dim)

    def transform(self, theta, noise):
        return self.summaries(theta) + self.cfg["noise_std"] * noise

    def log_likelihood(self, theta, x):
        mean = self.summaries(theta)
        out = np.sum(norm.logpdf(x[None, :], mean, self.cfg["noise_std"]), axis=1)
        return np.where(np.isfinite(out), out, -np.inf)
