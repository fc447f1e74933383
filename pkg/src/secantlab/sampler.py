"""Few-step generation and inversion with secant models, plus Euler/Heun baselines.

A secant model is any callable ``f(x, t, s, w=None, label=None)``;
:class:`NetModel` adapts a trained :class:`~secantlab.net.SecantNet`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import guidance_combine, make_rng
from .errors import CapabilityError, ConfigError
from .interpolant import Interpolant
from .net import SecantNet

GUIDANCE_MODES = ("none", "embedded", "separate")


@dataclass(frozen=True)
class SamplePlan:
    n_steps: int = 4
    direction: str = "generate"
    guidance: str = "none"
    w: float = 1.0
    guidance_skip: int = 0
    label: int | None = None
    seed: int = 0
    n: int = 1000

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.direction not in ("generate", "invert"):
            raise ConfigError(f"direction must be 'generate' or 'invert', got {self.direction!r}")
        if self.guidance not in GUIDANCE_MODES:
            raise ConfigError(f"guidance mode must be one of {GUIDANCE_MODES}, got {self.guidance!r}")
        if not 0 <= self.guidance_skip <= self.n_steps:
            raise ConfigError("guidance_skip must lie in [0, n_steps]")
        if self.guidance == "separate" and self.label is None:
            raise ConfigError("separate guidance needs a class label")
        if self.n < 1:
            raise ConfigError("n must be >= 1")

    def echo(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class NetModel:
    """Secant model view of a network with a chosen parameter vector."""

    def __init__(self, net: SecantNet, params=None, bidirectional: bool = True):
        self.net = net
        self.params = net.params if params is None else np.asarray(params, dtype=np.float64)
        self.bidirectional = bidirectional
        self.dim = net.spec.input_dim

    def __call__(self, x, t, s, w=None, label=None):
        spec = self.net.spec
        if spec.use_w and w is None:
            w = 1.0
        if label is not None and not spec.num_classes:
            raise ConfigError("label given but the model is unconditional")
        return self.net.apply(self.params, x, t, s, w, label)


def _step_velocity(model, plan: SamplePlan, x, t, s, step: int):
    w = 1.0 if step < plan.guidance_skip else plan.w
    tt = np.full(len(x), t)
    ss = np.full(len(x), s)
    if plan.guidance == "none":
        kw = {} if plan.label is None else {"label": plan.label}
        return model(x, tt, ss, **kw)
    if plan.guidance == "embedded":
        kw = {"w": w} if plan.label is None else {"w": w, "label": plan.label}
        return model(x, tt, ss, **kw)
    f_c = model(x, tt, ss, label=plan.label)
    if w == 1.0:
        return f_c
    f_u = model(x, tt, ss)
    return guidance_combine(f_u, f_c, w)


def _check_model(model, plan: SamplePlan):
    if not isinstance(model, NetModel):
        return
    spec = model.net.spec
    if plan.guidance == "embedded" and not spec.use_w:
        raise ConfigError("embedded guidance needs a guidance-conditioned model")
    if plan.guidance == "separate" and not spec.num_classes:
        raise ConfigError("separate guidance needs a class-conditioned model")
    if plan.label is not None and not spec.num_classes:
        raise ConfigError("label given but the model is unconditional")


def _run(model, plan: SamplePlan, ip: Interpolant, x):
    _check_model(model, plan)
    grid = ip.grid(plan.n_steps, plan.direction)
    x = np.array(x, dtype=np.float64, copy=True)
    for i, (t, s) in enumerate(zip(grid[:-1], grid[1:])):
        x = x + (s - t) * _step_velocity(model, plan, x, t, s, i)
    return x


def initial_noise(plan: SamplePlan, dim: int) -> np.ndarray:
    return make_rng((plan.seed, 9001)).standard_normal((plan.n, dim))


def generate(model, plan: SamplePlan, ip: Interpolant, noise=None, dim: int | None = None):
    """Integrate from the noise endpoint to the data endpoint in ``plan.n_steps`` jumps."""
    if plan.direction != "generate":
        raise ConfigError("generate needs a plan with direction 'generate'")
    if noise is None:
        dim = dim if dim is not None else getattr(model, "dim", None)
        if dim is None:
            raise ConfigError("pass noise or dim for models without a known dimension")
        noise = initial_noise(plan, dim)
    return _run(model, plan, ip, noise)


def invert(model, plan: SamplePlan, ip: Interpolant, x_data):
    """Map data back to noise; needs a model trained on both time orderings."""
    if not getattr(model, "bidirectional", True):
        raise CapabilityError("model was trained with unidirectional time pairs and cannot invert")
    if plan.direction != "invert":
        plan = SamplePlan(**{**asdict(plan), "direction": "invert"})
    return _run(model, plan, ip, x_data)


def baseline_solve(field, method: str, n_steps: int, ip: Interpolant, start, grid=None,
                   label=None, w=None):
    """Explicit Euler or Heun on dx/dt = v(x, t) over a uniform noise-to-data grid."""
    if method not in ("euler", "heun"):
        raise ConfigError(f"method must be 'euler' or 'heun', got {method!r}")
    grid = ip.grid(n_steps) if grid is None else np.asarray(grid, dtype=np.float64)
    kw = {}
    if label is not None:
        kw["label"] = label
    if w is not None:
        kw["w"] = w
    x = np.array(start, dtype=np.float64, copy=True)
    n = len(x)
    for t, s in zip(grid[:-1], grid[1:]):
        h = s - t
        v = field(x, np.full(n, t), **kw)
        pred = x + h * v
        if method == "euler":
            x = pred
        else:
            x = x + 0.5 * h * (v + field(pred, np.full(n, s), **kw))
    return x
