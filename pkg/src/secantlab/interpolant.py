"""Noising paths x_t = alpha_t * x0 + sigma_t * z and their time derivatives.

Two schedules are provided:

* ``linear``: alpha_t = t, sigma_t = 1 - t on [0, 1]. Data sits at t = 1 and
  noise at t = 0, so samplers integrate upward in time.
* ``trig``: alpha_t = cos t, sigma_t = sin t on [0, pi/2]. Data sits at t = 0
  and noise at t = pi/2. Training and sampling times are clipped into
  [eps1, pi/2 - eps2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, TimeRangeError

KINDS = ("linear", "trig")


@dataclass(frozen=True)
class Interpolant:
    kind: str = "linear"
    eps1: float = 0.001
    eps2: float = 0.00625

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown interpolant {self.kind!r}; expected one of {KINDS}")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ConfigError("eps1 and eps2 must be non-negative")
        if self.kind == "trig" and self.eps1 + self.eps2 >= math.pi / 2:
            raise ConfigError("eps1 + eps2 leaves an empty trig time range")

    @property
    def domain(self) -> tuple[float, float]:
        """Interval on which the coefficients are defined."""
        return (0.0, 1.0) if self.kind == "linear" else (0.0, math.pi / 2)

    @property
    def bounds(self) -> tuple[float, float]:
        """Clipped interval used for training and sampling times."""
        if self.kind == "linear":
            return (0.0, 1.0)
        return (self.eps1, math.pi / 2 - self.eps2)

    @property
    def data_time(self) -> float:
        lo, hi = self.bounds
        return hi if self.kind == "linear" else lo

    @property
    def noise_time(self) -> float:
        lo, hi = self.bounds
        return lo if self.kind == "linear" else hi

    def clip(self, t):
        lo, hi = self.bounds
        return np.clip(t, lo, hi)

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        lo, hi = self.domain
        # Tolerate round-off from grid arithmetic at the ends.
        tol = 1e-12
        if np.any(t < lo - tol) or np.any(t > hi + tol) or not np.all(np.isfinite(t)):
            bad = t[(t < lo - tol) | (t > hi + tol) | ~np.isfinite(t)].ravel()[0]
            raise TimeRangeError(
                f"time {bad!r} outside the admissible interval [{lo}, {hi}] "
                f"of the {self.kind} interpolant"
            )
        return t

    def coefficients(self, t):
        """Return (alpha, sigma, alpha', sigma') at ``t`` (scalar or array)."""
        t = self._check(t)
        if self.kind == "linear":
            one = np.ones_like(t)
            out = (t, 1.0 - t, one, -one)
        else:
            c, s = np.cos(t), np.sin(t)
            out = (c, s, -s, c)
        if t.ndim == 0:
            return tuple(float(v) for v in out)
        return out

    def alpha_sigma(self, t):
        a, s, _, _ = self.coefficients(t)
        return a, s

    def noised_and_target(self, x0, z, t):
        """Noised point and its tangent regression target.

        ``x0`` and ``z`` are ``[n, d]`` (or ``[d]``) arrays; ``t`` is scalar or
        ``[n]``.
        """
        x0 = np.asarray(x0, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if x0.shape != z.shape:
            raise ShapeError(f"x0 shape {x0.shape} does not match z shape {z.shape}")
        a, s, da, ds = (np.asarray(c, dtype=np.float64) for c in self.coefficients(t))
        if x0.ndim == 2 and a.ndim == 1:
            a, s, da, ds = (c[:, None] for c in (a, s, da, ds))
        return a * x0 + s * z, da * x0 + ds * z

    def noised(self, x0, z, t):
        return self.noised_and_target(x0, z, t)[0]

    def target(self, x0, z, t):
        return self.noised_and_target(x0, z, t)[1]

    def grid(self, n_steps: int, direction: str = "generate") -> np.ndarray:
        """Uniform time grid of ``n_steps`` intervals.

        ``generate`` runs noise -> data, ``invert`` runs data -> noise.
        """
        if n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if direction == "generate":
            start, stop = self.noise_time, self.data_time
        elif direction == "invert":
            start, stop = self.data_time, self.noise_time
        else:
            raise ConfigError(f"unknown direction {direction!r}")
        return np.linspace(start, stop, n_steps + 1)

