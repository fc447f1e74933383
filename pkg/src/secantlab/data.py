"""Isotropic Gaussian mixtures: exact samples and closed-form velocity fields."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, SingularityError
from .interpolant import Interpolant

NULL_LABEL = -1  # "no class" in label arrays


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # [K, dim]
    stds: np.ndarray
    class_labels: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sd = np.asarray(self.stds, dtype=np.float64).ravel()
        if not (len(w) == len(mu) == len(sd)) or len(w) == 0:
            raise ConfigError("weights, means and stds must describe the same non-empty component list")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must be non-negative and sum to 1 (sum={w.sum()!r})")
        if np.any(sd < 0):
            raise ConfigError("component stds must be >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)
        if self.class_labels is not None:
            lab = np.asarray(self.class_labels, dtype=np.int64).ravel()
            if len(lab) != len(w):
                raise ConfigError("class_labels must give one label per component")
            if np.any(lab < 0):
                raise ConfigError("class labels must be non-negative integers")
            object.__setattr__(self, "class_labels", lab)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int | None:
        if self.class_labels is None:
            return None
        return int(self.class_labels.max()) + 1

    def restricted(self, label: int) -> "GaussianMixture":
        """Mixture conditioned on components carrying ``label``."""
        keep = self._label_mask(label)
        w = self.weights[keep]
        return GaussianMixture(w / w.sum(), self.means[keep], self.stds[keep],
                               self.class_labels[keep], name=f"{self.name}|{label}")

    def _label_mask(self, label: int) -> np.ndarray:
        if self.class_labels is None:
            raise ConfigError(f"mixture {self.name!r} has no class labels")
        keep = (self.class_labels == label) & (self.weights > 0)
        if not keep.any():
            raise ConfigError(f"unknown class label {label} for mixture {self.name!r}")
        return keep

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        d = self.means - m
        cov = (self.weights[:, None, None] * np.einsum("ki,kj->kij", d, d)).sum(0)
        return cov + np.eye(self.dim) * float(self.weights @ self.stds**2)

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` points; returns (x0, component index)."""
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.stds[comp, None] * eps, comp

    def to_dict(self) -> dict:
        out = {"name": self.name, "weights": self.weights.tolist(),
               "means": self.means.tolist(), "stds": self.stds.tolist()}
        if self.class_labels is not None:
            out["class_labels"] = self.class_labels.tolist()
        return out


def _ring(k: int, radius: float, std: float) -> GaussianMixture:
    ang = 2 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixture(np.full(k, 1.0 / k), means, np.full(k, std), name=f"ring{k}")


def preset(name: str) -> GaussianMixture:
    if name == "point":
        return GaussianMixture([1.0], [[0.0]], [0.0], name="point")
    if name == "gauss1":
        return GaussianMixture([1.0], [[0.0]], [1.0], name="gauss1")
    if name == "ring8":
        return _ring(8, 1.0, 0.1)
    if name == "cond2":
        return GaussianMixture([0.5, 0.5], [[1.0, 1.0], [-1.0, -1.0]], [0.2, 0.2],
                               class_labels=[0, 1], name="cond2")
    raise ConfigError(f"unknown dataset preset {name!r}; expected one of {PRESETS}")


PRESETS = ("point", "gauss1", "ring8", "cond2")


def mixture_from_spec(spec) -> GaussianMixture:
    """Build a mixture from a preset name or a JSON component list.

    The list form is ``[[weight, [mean...], std], ...]`` with an optional
    fourth integer class label per component.
    """
    if isinstance(spec, GaussianMixture):
        return spec
    if isinstance(spec, str):
        text = spec.strip()
        if not text.startswith("["):
            return preset(text)
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse component list: {exc}") from None
    try:
        weights = [float(c[0]) for c in spec]
        means = [list(map(float, c[1])) for c in spec]
        stds = [float(c[2]) for c in spec]
        labels = [int(c[3]) for c in spec] if all(len(c) > 3 for c in spec) else None
    except (TypeError, IndexError, ValueError) as exc:
        raise ConfigError(f"malformed component list: {exc}") from None
    if len({len(m) for m in means}) != 1:
        raise ConfigError("all component means must share one dimension")
    return GaussianMixture(weights, means, stds, labels)


@dataclass
class DataBatch:
    x0: np.ndarray
    z: np.ndarray
    labels: np.ndarray | None = None
    drop_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.drop_mask is None:
            self.drop_mask = np.zeros(len(self.x0), dtype=bool)

    def __len__(self):
        return len(self.x0)

    @property
    def effective_labels(self) -> np.ndarray | None:
        """Labels with dropped entries replaced by NULL_LABEL."""
        if self.labels is None:
            return None
        return np.where(self.drop_mask, NULL_LABEL, self.labels)


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator keyed by an int or a tuple of ints."""
    if isinstance(seed, np.random.Generator):
        return seed
    key = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def sample_batch(mix: GaussianMixture, n: int, dropout: float = 0.0, rng_seed=0) -> DataBatch:
    if n < 1:
        raise ConfigError("batch size must be >= 1")
    if not 0.0 <= dropout <= 1.0:
        raise ConfigError("label dropout must lie in [0, 1]")
    rng = make_rng(rng_seed)
    x0, comp = mix.sample(n, rng)
    z = rng.standard_normal((n, mix.dim))
    drop = rng.random(n) < dropout
    labels = None if mix.class_labels is None else mix.class_labels[comp]
    return DataBatch(x0, z, labels, drop)


def _broadcast_rows(x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
    return x, t, single


def posterior_means(mix: GaussianMixture, ip: Interpolant, x, t, label=None):
    """E[x0 | x_t = x] and E[z | x_t = x] for every row of ``x``.

    ``label`` is None, an int, or a per-row int array where NULL_LABEL rows
    use the full mixture.
    """
    x, t, single = _broadcast_rows(x, t)
    if x.shape[1] != mix.dim:
        raise ShapeError(f"x has dimension {x.shape[1]}, mixture has {mix.dim}")
    a, sg, _, _ = (np.atleast_1d(c) for c in ip.coefficients(t))
    mu, sd = mix.means, mix.stds
    var = a[:, None] ** 2 * sd[None, :] ** 2 + sg[:, None] ** 2  # [n, K]
    diff = x[:, None, :] - a[:, None, None] * mu[None, :, :]  # [n, K, d]

    allowed = np.broadcast_to(mix.weights > 0, var.shape).copy()
    if label is not None:
        lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (len(x),))
        for c in np.unique(lab):
            if c == NULL_LABEL:
                continue
            allowed[lab == c] &= mix._label_mask(int(c))

    degenerate = (var <= 0) & allowed
    rows = degenerate.any(axis=1)
    safe_var = np.where(var > 0, var, 1.0)
    d = mix.dim
    logr = (np.log(np.where(allowed, mix.weights[None, :], 1.0))
            - 0.5 * d * np.log(2 * np.pi * safe_var)
            - 0.5 * (diff**2).sum(-1) / safe_var)
    logr = np.where(allowed & (var > 0), logr, -np.inf)

    if rows.any():
        # Point-mass components at sigma_t = 0: x_t = alpha_t * mean exactly.
        if not np.all(sd[allowed[rows].any(axis=0)] == 0):
            raise SingularityError(
                "sigma_t = 0 with a point-mass component mixed with Gaussian ones; "
                "clip the time range away from the data endpoint"
            )
        dist = np.where(degenerate[rows], (diff[rows] ** 2).sum(-1), np.inf)
        pick = np.argmin(dist, axis=1)
        lr = np.full((rows.sum(), len(mu)), -np.inf)
        lr[np.arange(len(pick)), pick] = 0.0
        logr[rows] = lr

    logr -= logr.max(axis=1, keepdims=True)
    resp = np.exp(logr)
    resp /= resp.sum(axis=1, keepdims=True)

    gain_x0 = a[:, None] * sd[None, :] ** 2 / safe_var  # [n, K]
    gain_z = sg[:, None] / safe_var
    ex0 = (resp[:, :, None] * (mu[None] + gain_x0[:, :, None] * diff)).sum(1)
    ez = (resp[:, :, None] * (gain_z[:, :, None] * diff)).sum(1)
    if single:
        return ex0[0], ez[0]
    return ex0, ez


def analytic_velocity(mix: GaussianMixture, ip: Interpolant, x, t, label=None):
    """Closed-form v(x, t) = E[alpha'_t x0 + sigma'_t z | x_t = x]."""
    x_arr, t_arr, single = _broadcast_rows(x, t)
    ex0, ez = posterior_means(mix, ip, x_arr, t_arr, label)
    _, _, da, ds = (np.atleast_1d(c) for c in ip.coefficients(t_arr))
    v = da[:, None] * ex0 + ds[:, None] * ez
    return v[0] if single else v


def guided_velocity(mix: GaussianMixture, ip: Interpolant, x, t, label, w):
    """v_u + w (v_c - v_u); rows whose label is NULL_LABEL get v_u."""
    if mix.class_labels is None:
        raise ConfigError(f"mixture {mix.name!r} has no class labels for guidance")
    v_u = analytic_velocity(mix, ip, x, t, None)
    v_c = analytic_velocity(mix, ip, x, t, label)
    return guidance_combine(v_u, v_c, w)


def guidance_combine(f_u, f_c, w):
    """f_u + w (f_c - f_u), written so that w = 0 and w = 1 are exact."""
    w = np.asarray(w, dtype=np.float64)
    if np.ndim(f_u) == 2 and w.ndim == 1:
        w = w[:, None]
    return (1.0 - w) * f_u + w * f_c


def population_target_std(mix: GaussianMixture) -> float:
    """Pooled per-coordinate std of x0 - z for x0 ~ mix, z ~ N(0, I)."""
    cov = mix.covariance()
    var = np.trace(cov) / mix.dim + 1.0
    # Between-coordinate spread of per-coordinate means also enters the pooled std.
    m = mix.mean()
    var += float(np.mean(m**2) - np.mean(m) ** 2)
    return math.sqrt(var)
