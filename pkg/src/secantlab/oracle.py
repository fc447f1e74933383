"""Ground-truth machinery: velocity fields, the secant by fine integration,
Monte-Carlo tangent averages and Picard iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .data import GaussianMixture, analytic_velocity, guidance_combine, guided_velocity, make_rng
from .errors import DivergenceError
from .interpolant import Interpolant
from .timesampling import RSampling, r_from_unit


class MixtureField:
    """Analytic velocity of a Gaussian mixture, optionally guided."""

    def __init__(self, mix: GaussianMixture, ip: Interpolant):
        self.mix = mix
        self.ip = ip

    def __call__(self, x, t, label=None, w=None):
        if w is None:
            return analytic_velocity(self.mix, self.ip, x, t, label)
        return guided_velocity(self.mix, self.ip, x, t, label, w)


class NetField:
    """A trained network evaluated on the diagonal s = t, used as a teacher."""

    def __init__(self, net, params=None):
        self.net = net
        self.params = net.params if params is None else params

    def __call__(self, x, t, label=None, w=None):
        spec = self.net.spec
        lab = label if spec.num_classes else None
        if w is None or spec.use_w:
            ww = None if not spec.use_w else (1.0 if w is None else w)
            return self.net.apply(self.params, x, t, t, ww, lab)
        v_u = self.net.apply(self.params, x, t, t, None, None)
        v_c = self.net.apply(self.params, x, t, t, None, lab)
        return guidance_combine(v_u, v_c, w)


def _rows(x, t, s):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (n,)).copy()
    return x, t, s, single


def integrate(field, x, t, s, substeps: int, keep_trajectory: bool = False):
    """Classical RK4 from t to s with ``substeps`` equal steps per row.

    Returns the endpoint, and the node states ``[substeps + 1, n, d]`` when
    ``keep_trajectory`` is set.
    """
    x, t, s, single = _rows(x, t, s)
    h = ((s - t) / substeps)[:, None]
    hh = h[:, 0]
    traj = [x.copy()] if keep_trajectory else None
    y = x.copy()
    for k in range(substeps):
        r = t + k * hh
        k1 = field(y, r)
        k2 = field(y + 0.5 * h * k1, r + 0.5 * hh)
        k3 = field(y + 0.5 * h * k2, r + 0.5 * hh)
        k4 = field(y + h * k3, r + hh)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if not np.all(np.isfinite(y)):
            bad = int(np.argmax(~np.isfinite(y).all(axis=1)))
            raise DivergenceError(f"non-finite state while integrating at time {r[bad] + hh[bad]!r}")
        if keep_trajectory:
            traj.append(y.copy())
    end = y[0] if single else y
    if keep_trajectory:
        return end, np.stack(traj)
    return end


def secant_oracle(field, x, t, s, substeps: int = 1000):
    """Average velocity (x_s - x_t) / (s - t) along the true trajectory.

    Rows with s == t return field(x, t).
    """
    if substeps < 16:
        raise ValueError("secant_oracle needs at least 16 substeps")
    x2, t2, s2, single = _rows(x, t, s)
    end = integrate(field, x2, t2, s2, substeps)
    same = s2 == t2
    gap = np.where(same, 1.0, s2 - t2)[:, None]
    out = (end - x2) / gap
    if same.any():
        out[same] = field(x2[same], t2[same])
    return out[0] if single else out


class ExactSecant:
    """Secant model backed by fine integration of a velocity field."""

    def __init__(self, field, substeps: int = 200):
        self.field = field
        self.substeps = substeps

    def __call__(self, x, t, s, w=None, label=None):
        if w is None and label is None:
            return secant_oracle(self.field, x, t, s, self.substeps)
        return secant_oracle(lambda xx, tt: self.field(xx, tt, label=label, w=w), x, t, s, self.substeps)


def mc_secant(field, x, t, s, n_draws: int, r_mode: RSampling | None = None, rng=0,
              substeps: int = 10_000):
    """Monte-Carlo mean of v(x_r, r) for r between t and s along the trajectory.

    The trajectory from (x, t) is integrated once at ``substeps`` resolution;
    x_r is read off it by linear interpolation between nodes. With a
    truncated-normal ``r_mode`` each draw carries the weight 1 / q(r~).
    Returns (estimate, standard error) per coordinate.
    """
    r_mode = r_mode or RSampling()
    rng = make_rng(rng)
    x = np.asarray(x, dtype=np.float64).ravel()
    t, s = float(t), float(s)
    if t == s:
        v = np.asarray(field(x[None], np.array([t])))[0]
        return v, np.zeros_like(v)
    _, traj = integrate(field, x[None], t, s, substeps, keep_trajectory=True)
    traj = traj[:, 0, :]
    u = rng.random(n_draws)
    r, weight = r_from_unit(r_mode, np.full(n_draws, t), np.full(n_draws, s), u)
    pos = np.clip((r - t) / (s - t), 0.0, 1.0) * substeps
    lo = np.minimum(np.floor(pos).astype(np.int64), substeps - 1)
    frac = (pos - lo)[:, None]
    x_r = (1.0 - frac) * traj[lo] + frac * traj[lo + 1]
    vals = weight[:, None] * np.asarray(field(x_r, r))
    est = vals.mean(axis=0)
    stderr = vals.std(axis=0, ddof=1) / np.sqrt(n_draws)
    return est, stderr


@dataclass
class PicardResult:
    s_grid: np.ndarray
    iterates: list  # f_0 .. f_n on the grid, each [len(s_grid), d]
    sup_errors: np.ndarray  # sup_s |f_k - f| for k = 0..n
    reference: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        e = self.sup_errors
        return e[1:] / e[:-1]


def picard_iterate(field, x, t: float, s_grid, n_iters: int = 5, substeps: int = 2000,
                   reference=None) -> PicardResult:
    """Fixed-point iteration f_{n+1}(s) = mean over r in [t, s] of v(x + (r - t) f_n(r), r).

    Starts from f_0 = 0. ``s_grid`` is a uniform grid starting at ``t``; the
    integrals are cumulative Simpson sums on it. The reference secant comes
    from :func:`secant_oracle` unless supplied.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    s_grid = np.asarray(s_grid, dtype=np.float64)
    if s_grid[0] != t:
        s_grid = np.concatenate([[t], s_grid])
    m = len(s_grid)
    rel = (s_grid - t)[:, None]
    if reference is None:
        reference = secant_oracle(field, np.repeat(x[None], m, axis=0), t, s_grid, substeps)
    f = np.zeros((m, len(x)))
    iterates = [f]
    errors = [np.abs(f - reference).max()]
    growth = 0
    for k in range(n_iters):
        g = np.asarray(field(x[None] + rel * f, s_grid))
        integral = cumulative_simpson(g, x=s_grid, axis=0, initial=0.0)
        f_new = np.empty_like(g)
        f_new[0] = g[0]
        f_new[1:] = integral[1:] / rel[1:]
        f = f_new
        iterates.append(f)
        errors.append(np.abs(f - reference).max())
        growth = growth + 1 if errors[-1] > errors[-2] else 0
        if growth >= 3:
            lh = errors[-1] / errors[-2]
            raise DivergenceError(
                f"Picard iteration diverging after {k + 1} iterations; "
                f"effective contraction factor ~{lh:.3g} (Lh estimate >= 1)"
            )
    return PicardResult(s_grid, iterates, np.asarray(errors), reference)
