"""Diffusion, secant and consistency losses with exact parameter gradients.

Every loss returns a :class:`LossOutput` holding the scalar value, the
gradient with respect to the student's parameters, the number of batched
forward/backward evaluations it performed, and the regression targets and
predictions it compared.

Models
------
``student`` is either a :class:`~secantlab.net.SecantNet` (differentiable)
or any callable ``f(x, t, s, w=None, label=None)``; callables yield no
gradient. ``frozen`` is a :class:`~secantlab.net.FrozenSnapshot` evaluated
through the student's architecture, a callable of the same form, or None
(a snapshot of the student's current parameters). ``teacher`` is a
velocity field ``v(x, t[, label=..., w=...])``.

Every frozen and teacher output is treated as a constant, so no gradient
flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataBatch, guidance_combine
from .errors import ConfigError, ShapeError, TimeRangeError
from .interpolant import Interpolant
from .net import FrozenSnapshot, SecantNet, grad_check
from .timesampling import RSampling, TimePairPolicy, sample_pair, sample_r, sample_tau

LOSS_NAMES = ("diff", "sdei", "stei", "sdee", "stee", "ct", "cd")
DISTILLATION = ("sdei", "sdee", "cd")


@dataclass(frozen=True)
class LossKind:
    name: str
    lam: float = 1.0  # STEI: weight of the diffusion term
    delta: float = 1e-3  # CT/CD: finite-difference step

    def __post_init__(self):
        name = self.name.lower()
        object.__setattr__(self, "name", name)
        if name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.name!r}; expected one of {LOSS_NAMES}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam!r}")
        if not self.delta > 0:
            raise ConfigError(f"consistency step delta must be > 0, got {self.delta!r}")

    @property
    def needs_teacher(self) -> bool:
        return self.name in DISTILLATION

    @property
    def end_point(self) -> bool:
        return self.name in ("sdee", "stee")

    @property
    def label(self) -> str:
        return self.name.upper() if self.name != "diff" else "Diff"


@dataclass
class LossOutput:
    value: float
    grads: np.ndarray | None
    n_forward: int
    n_backward: int
    targets: np.ndarray
    predictions: np.ndarray
    weights: np.ndarray
    # STEI only: the diffusion term and its weight.
    aux_targets: np.ndarray | None = None
    aux_predictions: np.ndarray | None = None
    lam: float = 0.0

    def recompute_value(self) -> float:
        """Loss value rebuilt from the stored matrices."""
        sq = ((self.predictions - self.targets) ** 2).sum(axis=1)
        value = float(np.mean(self.weights * sq))
        if self.aux_targets is not None:
            value += self.lam * float(
                np.mean(((self.aux_predictions - self.aux_targets) ** 2).sum(axis=1)))
        return value


@dataclass
class LossTimes:
    t: np.ndarray
    s: np.ndarray
    r: np.ndarray | None = None
    weight: np.ndarray | None = None  # importance weight of r
    tau: np.ndarray | None = None  # STEI diffusion-term times


@dataclass
class _Tally:
    forward: int = 0
    backward: int = 0


@dataclass
class _Ctx:
    student: object
    params: np.ndarray | None
    frozen: object
    labels: np.ndarray | None
    w: np.ndarray | None
    tally: _Tally = field(default_factory=_Tally)
    pending: list = field(default_factory=list)  # (cache, dout) pairs

    @property
    def differentiable(self) -> bool:
        return isinstance(self.student, SecantNet)

    def _kwargs(self, spec, w):
        kw = {}
        if spec is None:
            if w is not None:
                kw["w"] = w
            if self.labels is not None:
                kw["label"] = self.labels
            return kw
        if spec.use_w:
            kw["w"] = 1.0 if w is None else w
        if spec.num_classes:
            kw["label"] = self.labels
        return kw

    def student_eval(self, x, t, s, w="default"):
        w = self.w if isinstance(w, str) else w
        self.tally.forward += 1
        if self.differentiable:
            kw = self._kwargs(self.student.spec, w)
            return self.student.apply(self.params, x, t, s, keep_cache=True, **kw)
        return np.asarray(self.student(x, t, s, **self._kwargs(None, w))), None

    def frozen_eval(self, x, t, s, w="default", labels="default"):
        w = self.w if isinstance(w, str) else w
        self.tally.forward += 1
        saved = self.labels
        if not isinstance(labels, str):
            self.labels = labels
        try:
            if isinstance(self.frozen, FrozenSnapshot):
                kw = self._kwargs(self.student.spec, w)
                return self.student.apply(self.frozen.params, x, t, s, **kw)
            return np.asarray(self.frozen(x, t, s, **self._kwargs(None, w)))
        finally:
            self.labels = saved

    def teacher_eval(self, teacher, x, t):
        self.tally.forward += 1
        kw = {}
        if self.labels is not None:
            kw["label"] = self.labels
        if self.w is not None:
            kw["w"] = self.w
        return np.asarray(teacher(x, t, **kw))

    def add_term(self, cache, pred, target, weight, scale=1.0):
        """Register a squared-error term; returns its contribution to the value."""
        n = len(pred)
        diff = pred - target
        value = scale * float(np.mean(weight * (diff**2).sum(axis=1)))
        if cache is not None:
            self.pending.append((cache, scale * 2.0 * weight[:, None] * diff / n))
        return value

    def gradient(self):
        if not self.differentiable:
            return None
        grad = np.zeros_like(self.params)
        for cache, dout in self.pending:
            grad += self.student.backward(cache, dout)
            self.tally.backward += 1
        return grad


def _context(student, frozen, batch, w, params):
    if isinstance(student, SecantNet):
        params = student.params if params is None else np.asarray(params, dtype=np.float64)
        if frozen is None:
            frozen = student.snapshot()
    elif frozen is None:
        frozen = student
    labels = batch.effective_labels
    if w is not None:
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), (len(batch),))
    return _Ctx(student, params, frozen, labels, w)


def _times(x, n):
    arr = np.broadcast_to(np.asarray(x, dtype=np.float64), (n,))
    return arr.copy()


def _weights(weight, n):
    if weight is None:
        return np.ones(n)
    return _times(weight, n)


def _check_between(r, t, s):
    lo, hi = np.minimum(t, s), np.maximum(t, s)
    tol = 1e-12
    bad = (r < lo - tol) | (r > hi + tol)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise TimeRangeError(f"interior time r={r[i]!r} outside [{lo[i]!r}, {hi[i]!r}]")


def _check_batch(batch: DataBatch):
    if batch.x0.shape != batch.z.shape or batch.x0.ndim != 2:
        raise ShapeError(f"batch x0 {batch.x0.shape} and z {batch.z.shape} must be equal [n, d] arrays")


def _output(ctx, value, targets, preds, weights, **aux):
    grads = ctx.gradient()
    return LossOutput(value, grads, ctx.tally.forward, ctx.tally.backward,
                      targets, preds, weights, **aux)


# -- losses --------------------------------------------------------------

def diffusion_loss(student, batch: DataBatch, ip: Interpolant, t, w=None, params=None) -> LossOutput:
    """Regress f(x_t, t, t) on the tangent target alpha'_t x0 + sigma'_t z."""
    _check_batch(batch)
    n = len(batch)
    t = _times(t, n)
    ctx = _context(student, student, batch, w, params)
    x_t, target = ip.noised_and_target(batch.x0, batch.z, t)
    pred, cache = ctx.student_eval(x_t, t, t)
    weight = np.ones(n)
    value = ctx.add_term(cache, pred, target, weight)
    return _output(ctx, value, target, pred, weight)


def sdei_loss(student, frozen, teacher, batch: DataBatch, ip: Interpolant, t, s, r,
              weight=None, w=None, params=None) -> LossOutput:
    """Distillation by estimating the interior point.

    x^_r = x_t + (r - t) f-(x_t, t, r); target v(x^_r, r); prediction f(x_t, t, s).
    """
    _check_batch(batch)
    n = len(batch)
    t, s, r = _times(t, n), _times(s, n), _times(r, n)
    _check_between(r, t, s)
    ctx = _context(student, frozen, batch, w, params)
    x_t = ip.noised(batch.x0, batch.z, t)
    x_r = x_t + (r - t)[:, None] * ctx.frozen_eval(x_t, t, r)
    target = ctx.teacher_eval(teacher, x_r, r)
    pred, cache = ctx.student_eval(x_t, t, s)
    wt = _weights(weight, n)
    value = ctx.add_term(cache, pred, target, wt)
    return _output(ctx, value, target, pred, wt)


def stei_loss(student, frozen, batch: DataBatch, ip: Interpolant, t, s, r, tau, lam: float = 1.0,
              weight=None, w=None, params=None) -> LossOutput:
    """Training by estimating the interior point, plus lam times a diffusion term at tau.

    The secant target is f-(x^_r, r, r). With a guidance-conditioned student
    that target is the guided combination of the frozen conditional and
    unconditional tangents.
    """
    if not lam >= 0:
        raise ConfigError(f"lambda must be >= 0, got {lam!r}")
    _check_batch(batch)
    n = len(batch)
    t, s, r, tau = _times(t, n), _times(s, n), _times(r, n), _times(tau, n)
    _check_between(r, t, s)
    ctx = _context(student, frozen, batch, w, params)
    x_t = ip.noised(batch.x0, batch.z, t)
    x_r = x_t + (r - t)[:, None] * ctx.frozen_eval(x_t, t, r)
    if ctx.w is None:
        target = ctx.frozen_eval(x_r, r, r)
    else:
        f_c = ctx.frozen_eval(x_r, r, r, w=None)
        f_u = ctx.frozen_eval(x_r, r, r, w=None, labels=None)
        target = guidance_combine(f_u, f_c, ctx.w)
    pred, cache = ctx.student_eval(x_t, t, s)
    wt = _weights(weight, n)
    value = ctx.add_term(cache, pred, target, wt)

    x_tau, d_target = ip.noised_and_target(batch.x0, batch.z, tau)
    d_pred, d_cache = ctx.student_eval(x_tau, tau, tau, w=None)
    value += ctx.add_term(d_cache, d_pred, d_target, np.ones(n), scale=lam)
    return _output(ctx, value, target, pred, wt, aux_targets=d_target,
                   aux_predictions=d_pred, lam=float(lam))


def _end_point(student, frozen, teacher, batch, ip, t, s, r, weight, w, params):
    _check_batch(batch)
    n = len(batch)
    t, s, r = _times(t, n), _times(s, n), _times(r, n)
    _check_between(r, t, s)
    ctx = _context(student, frozen, batch, w, params)
    x_r, data_target = ip.noised_and_target(batch.x0, batch.z, r)
    x_t = x_r + (t - r)[:, None] * ctx.frozen_eval(x_r, r, t)
    target = data_target if teacher is None else ctx.teacher_eval(teacher, x_r, r)
    pred, cache = ctx.student_eval(x_t, t, s)
    wt = _weights(weight, n)
    value = ctx.add_term(cache, pred, target, wt)
    return _output(ctx, value, target, pred, wt)


def sdee_loss(student, frozen, teacher, batch: DataBatch, ip: Interpolant, t, s, r,
              weight=None, w=None, params=None) -> LossOutput:
    """Distillation by estimating the end point.

    x^_t = x_r + (t - r) f-(x_r, r, t); target v(x_r, r); prediction f(x^_t, t, s).
    """
    if teacher is None:
        raise ConfigError("SDEE needs a teacher velocity field")
    return _end_point(student, frozen, teacher, batch, ip, t, s, r, weight, w, params)


def stee_loss(student, frozen, batch: DataBatch, ip: Interpolant, t, s, r,
              weight=None, w=None, params=None) -> LossOutput:
    """Training by estimating the end point; target alpha'_r x0 + sigma'_r z."""
    return _end_point(student, frozen, None, batch, ip, t, s, r, weight, w, params)


def consistency_loss(kind: str, student, frozen, teacher, batch: DataBatch, ip: Interpolant,
                     t, s, delta: float, w=None, params=None) -> LossOutput:
    """CT / CD diagnostic with a discrete time derivative of the frozen net.

    target = tangent + (s - t) [f-(x_t, t, s) - f-(x_{t-delta}, t, s)] / delta,
    where x_{t-delta} is re-noised from the same (x0, z). The tangent term is
    alpha'_t x0 + sigma'_t z for CT and the teacher v(x_t, t) for CD. Near the
    lower time bound a forward difference is used instead.
    """
    kind = kind.lower()
    if kind not in ("ct", "cd"):
        raise ConfigError(f"consistency kind must be 'ct' or 'cd', got {kind!r}")
    if not delta > 0:
        raise ConfigError(f"consistency step delta must be > 0, got {delta!r}")
    if kind == "cd" and teacher is None:
        raise ConfigError("CD needs a teacher velocity field")
    _check_batch(batch)
    n = len(batch)
    t, s = _times(t, n), _times(s, n)
    ctx = _context(student, frozen, batch, w, params)
    lo, _ = ip.bounds
    x_t, data_target = ip.noised_and_target(batch.x0, batch.z, t)
    backward = t - delta >= lo
    t_other = np.where(backward, t - delta, t + delta)
    x_other = ip.noised(batch.x0, batch.z, t_other)
    f_here = ctx.frozen_eval(x_t, t, s)
    f_other = ctx.frozen_eval(x_other, t, s)
    deriv = np.where(backward[:, None], f_here - f_other, f_other - f_here) / delta
    tangent = data_target if kind == "ct" else ctx.teacher_eval(teacher, x_t, t)
    target = tangent + (s - t)[:, None] * deriv
    pred, cache = ctx.student_eval(x_t, t, s)
    wt = np.ones(n)
    value = ctx.add_term(cache, pred, target, wt)
    return _output(ctx, value, target, pred, wt)


# -- dispatch ------------------------------------------------------------

def sample_loss_times(kind: LossKind, policy: TimePairPolicy, ip: Interpolant,
                      r_mode: RSampling, rng: np.random.Generator, n: int) -> LossTimes:
    """Draw the per-sample times a loss of ``kind`` consumes."""
    if kind.name == "diff":
        t = sample_tau(policy, ip, rng, n)
        return LossTimes(t, t.copy())
    t, s = sample_pair(policy, ip, rng, n)
    if kind.name in ("ct", "cd"):
        return LossTimes(t, s)
    r, weight = sample_r(r_mode, t, s, rng)
    tau = sample_tau(policy, ip, rng, n) if kind.name == "stei" else None
    return LossTimes(t, s, r, weight, tau)


def compute_loss(kind: LossKind, student, frozen, teacher, batch: DataBatch, ip: Interpolant,
                 times: LossTimes, w=None, params=None) -> LossOutput:
    name = kind.name
    if name == "diff":
        return diffusion_loss(student, batch, ip, times.t, w=w, params=params)
    if name == "sdei":
        return sdei_loss(student, frozen, teacher, batch, ip, times.t, times.s, times.r,
                         times.weight, w=w, params=params)
    if name == "stei":
        return stei_loss(student, frozen, batch, ip, times.t, times.s, times.r, times.tau,
                         kind.lam, times.weight, w=w, params=params)
    if name == "sdee":
        return sdee_loss(student, frozen, teacher, batch, ip, times.t, times.s, times.r,
                         times.weight, w=w, params=params)
    if name == "stee":
        return stee_loss(student, frozen, batch, ip, times.t, times.s, times.r,
                         times.weight, w=w, params=params)
    return consistency_loss(name, student, frozen, teacher, batch, ip, times.t, times.s,
                            kind.delta, w=w, params=params)


def target_std(outputs) -> np.ndarray:
    """Population std over all target coordinates, one value per output."""
    outputs = list(outputs)
    if not outputs:
        raise ValueError("target_std needs at least one loss output")
    return np.array([float(np.std(o.targets)) for o in outputs])


def loss_grad_check(kind: LossKind, net: SecantNet, teacher, batch: DataBatch, ip: Interpolant,
                    times: LossTimes, w=None, h: float = 1e-5, n_coords: int = 200,
                    seed: int = 0) -> float:
    """Finite-difference check of a loss gradient with the frozen snapshot held fixed."""
    frozen = net.snapshot()

    def loss_grad(p):
        out = compute_loss(kind, net, frozen, teacher, batch, ip, times, w=w, params=p)
        return out.value, out.grads

    return grad_check(loss_grad, net.params, h=h, n_coords=n_coords, seed=seed)
