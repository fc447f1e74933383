"""Sampling of training time pairs (t, s) and interior points r."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from .errors import ConfigError
from .interpolant import Interpolant

SIGMA_DATA = 0.5


@dataclass(frozen=True)
class TimePairPolicy:
    n_steps: int = 4
    t_mode: str = "continuous"
    bidirectional: bool = False
    p_mean: float = -1.0
    p_std: float = 1.4

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.t_mode not in ("discrete", "continuous"):
            raise ConfigError(f"t_mode must be 'discrete' or 'continuous', got {self.t_mode!r}")
        if self.t_mode == "discrete" and self.bidirectional:
            raise ConfigError("discrete t sampling cannot be combined with bidirectional pairs")
        if self.p_std <= 0:
            raise ConfigError("p_std must be positive")

    def max_gap(self, ip: Interpolant) -> float:
        lo, hi = ip.bounds
        return (hi - lo) / self.n_steps


@dataclass(frozen=True)
class RSampling:
    mode: str = "uniform"
    mu: float = 0.5
    sigma: float = 0.5

    def __post_init__(self):
        if self.mode not in ("uniform", "trunc_normal"):
            raise ConfigError(f"r_mode must be 'uniform' or 'trunc_normal', got {self.mode!r}")
        if self.mode == "trunc_normal" and not self.sigma > 0:
            raise ConfigError("r_sigma must be positive for truncated-normal r sampling")

    @property
    def _dist(self):
        a, b = (0.0 - self.mu) / self.sigma, (1.0 - self.mu) / self.sigma
        return truncnorm(a, b, loc=self.mu, scale=self.sigma)

    def unit_density(self, u):
        """Density of the fractional position r~ on [0, 1]."""
        if self.mode == "uniform":
            return np.ones_like(np.asarray(u, dtype=np.float64))
        return self._dist.pdf(u)

    def unit_from_uniform(self, u):
        if self.mode == "uniform":
            return np.asarray(u, dtype=np.float64)
        return self._dist.ppf(u)


def round_to_grid(t, d, n_steps: int, lo: float = 0.0, hi: float = 1.0):
    """Nearest multiple of the step on [lo, hi], clamped so that t + d <= hi."""
    step = (hi - lo) / n_steps
    k = np.floor((np.asarray(t) - lo) / step + 0.5)
    k_max = np.floor((hi - np.asarray(d) - lo) / step + 1e-9)
    return lo + np.minimum(k, k_max) * step


def _trig_times(policy: TimePairPolicy, ip: Interpolant, rng, n):
    sigma = np.exp(policy.p_mean + policy.p_std * rng.standard_normal(n))
    return ip.clip(np.arctan(sigma / SIGMA_DATA))


def sample_pair(policy: TimePairPolicy, ip: Interpolant, rng: np.random.Generator, n: int):
    """Draw ``n`` time pairs; returns arrays (t, s)."""
    lo, hi = ip.bounds
    gap = policy.max_gap(ip)
    if ip.kind == "linear":
        d = rng.uniform(0.0, gap, n)
        t = lo + rng.uniform(0.0, 1.0, n) * (hi - lo - d)
        if policy.t_mode == "discrete":
            t = round_to_grid(t, d, policy.n_steps, lo, hi)
        s = t + d
        if policy.bidirectional:
            swap = rng.random(n) < 0.5
            t, s = np.where(swap, s, t), np.where(swap, t, s)
        return t, s
    t = _trig_times(policy, ip, rng, n)
    if policy.t_mode == "discrete":
        step = gap
        t = lo + np.floor((t - lo) / step + 0.5) * step
        t = np.clip(t, lo, hi)
    d = rng.uniform(0.0, gap, n)
    if policy.bidirectional:
        d = np.where(rng.random(n) < 0.5, -d, d)
    s = ip.clip(t - d)
    return t, s


def sample_tau(policy: TimePairPolicy, ip: Interpolant, rng: np.random.Generator, n: int):
    """Single training times for diffusion-loss terms."""
    lo, hi = ip.bounds
    if ip.kind == "linear":
        return rng.uniform(lo, hi, n)
    return _trig_times(policy, ip, rng, n)


def r_from_unit(mode: RSampling, t, s, u):
    """Map uniform draws ``u`` to interior points r and importance weights."""
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    frac = mode.unit_from_uniform(u)
    weight = 1.0 / mode.unit_density(frac)
    r = t + frac * (s - t)
    same = t == s
    r = np.where(same, t, r)
    weight = np.where(same, 1.0, weight)
    return r, weight


def sample_r(mode: RSampling, t, s, rng: np.random.Generator):
    t = np.asarray(t, dtype=np.float64)
    u = rng.random(t.shape)
    return r_from_unit(mode, t, s, u)

