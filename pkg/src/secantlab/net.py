"""Fully-connected secant network f(x, t, s[, w, class]) with hand-written backprop.

Time conditioning follows the summed-embedding scheme: a fixed sinusoidal
feature map is applied to t and to s, each passes through its own learned
affine projection, and the network sees half their sum. The s projection is
cloned from the t projection, so f(x, t, t) reproduces a single-time net that
shares the weights. Guidance scale w enters through the same feature map of
(w - 1) followed by a zero-initialised projection; class labels add a learned
per-class vector (the last row is the null class).

Parameters live in one flat float64 vector; ``layout`` maps names to slices.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import NULL_LABEL, make_rng
from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    num_frequencies: int = 8
    max_frequency: float = 32.0
    embed_dim: int = 64
    use_s: bool = True
    use_w: bool = False
    num_classes: int | None = None
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError("input_dim and every hidden width must be >= 1")
        if self.num_frequencies < 1:
            raise ConfigError("num_frequencies must be >= 1")
        if self.activation not in ("silu", "tanh"):
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1 when given")

    @property
    def frequencies(self) -> np.ndarray:
        return np.geomspace(1.0, self.max_frequency, self.num_frequencies)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        f2, e = 2 * self.num_frequencies, self.embed_dim
        out = [("t_emb.W", (f2, e)), ("t_emb.b", (e,))]
        if self.use_s:
            out += [("s_emb.W", (f2, e)), ("s_emb.b", (e,))]
        if self.use_w:
            out += [("w_emb.W", (f2, e)), ("w_emb.b", (e,))]
        if self.num_classes:
            out += [("class_emb", (self.num_classes + 1, e))]
        widths = (self.input_dim + e,) + self.hidden_dims + (self.input_dim,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out += [(f"layer{i}.W", (a, b)), (f"layer{i}.b", (b,))]
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


def _act(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    return z / (1.0 + np.exp(-z))


def _act_grad(z, kind):
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    sg = 1.0 / (1.0 + np.exp(-z))
    return sg * (1.0 + z * (1.0 - sg))


@dataclass
class EvalCounter:
    forward: int = 0
    backward: int = 0

    def snapshot(self):
        return (self.forward, self.backward)


@dataclass
class FrozenSnapshot:
    """Stop-gradient copy of a parameter vector."""

    params: np.ndarray
    taken_at: int = 0

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64, copy=True)
        self.params.flags.writeable = False


class SecantNet:
    def __init__(self, spec: NetSpec, params: np.ndarray | None = None, seed: int = 0):
        self.spec = spec
        self._layout = spec.layout()
        self._slices = {}
        off = 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            self._slices[name] = (slice(off, off + size), shape)
            off += size
        self.counter = EvalCounter()
        if params is None:
            params = self.init_params(seed)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (off,):
            raise ConfigError(f"parameter vector has shape {params.shape}, architecture expects ({off},)")
        self.params = params

    # -- parameters -----------------------------------------------------
    def unflatten(self, params: np.ndarray) -> dict[str, np.ndarray]:
        return {k: params[sl].reshape(shape) for k, (sl, shape) in self._slices.items()}

    def init_params(self, seed: int = 0) -> np.ndarray:
        rng = make_rng((seed, 7001))
        p = np.zeros(self.spec.num_params)
        views = self.unflatten(p)
        for name, shape in self._layout:
            if name.endswith(".W") and not name.startswith(("s_emb", "w_emb")):
                bound = 1.0 / np.sqrt(shape[0])
                views[name][...] = rng.uniform(-bound, bound, size=shape)
            elif name.startswith("layer") and name.endswith(".b"):
                fan_in = self._slices[name.replace(".b", ".W")][1][0]
                bound = 1.0 / np.sqrt(fan_in)
                views[name][...] = rng.uniform(-bound, bound, size=shape)
            elif name == "class_emb":
                views[name][:-1] = rng.normal(0.0, 0.5, size=(shape[0] - 1, shape[1]))
        if self.spec.use_s:
            views["s_emb.W"][...] = views["t_emb.W"]
            views["s_emb.b"][...] = views["t_emb.b"]
        return p

    def snapshot(self, iteration: int = 0) -> FrozenSnapshot:
        return FrozenSnapshot(self.params, iteration)

    # -- evaluation -----------------------------------------------------
    def _features(self, u):
        arg = u[:, None] * self.spec.frequencies[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def _prepare(self, x, t, s, w, label):
        spec = self.spec
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = len(x)
        if x.shape[1] != spec.input_dim:
            raise ConfigError(f"input has dimension {x.shape[1]}, net expects {spec.input_dim}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        s = t if s is None else np.broadcast_to(np.asarray(s, dtype=np.float64), (n,))
        if spec.use_w and w is None:
            raise ConfigError("this net is guidance-conditioned; pass w")
        if not spec.use_w and w is not None:
            raise ConfigError("this net has no guidance input; w must be None")
        if w is not None:
            w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
        idx = None
        if label is not None and not spec.num_classes:
            raise ConfigError("this net is unconditional; label must be None")
        if spec.num_classes:
            if label is None:
                idx = np.full(n, spec.num_classes)
            else:
                lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))
                if np.any((lab >= spec.num_classes) | (lab < NULL_LABEL)):
                    raise ConfigError(f"label outside [0, {spec.num_classes}) and not null")
                idx = np.where(lab == NULL_LABEL, spec.num_classes, lab)
        return x, t, s, w, idx

    def apply(self, params, x, t, s=None, w=None, label=None, keep_cache=False):
        """Evaluate the network with an explicit parameter vector.

        Returns the output ``[n, d]``, plus the activation cache when
        ``keep_cache`` is set (needed by :meth:`backward`).
        """
        spec = self.spec
        x, t, s, w, idx = self._prepare(x, t, s, w, label)
        P = self.unflatten(params)
        phi_t = self._features(t)
        h = phi_t @ P["t_emb.W"] + P["t_emb.b"]
        phi_s = phi_w = None
        if spec.use_s:
            phi_s = self._features(s)
            h = (h + (phi_s @ P["s_emb.W"] + P["s_emb.b"])) / 2
        if spec.use_w:
            phi_w = self._features(w - 1.0)
            h = h + (phi_w @ P["w_emb.W"] + P["w_emb.b"])
        if idx is not None:
            h = h + P["class_emb"][idx]
        a = np.concatenate([x, h], axis=1)
        acts, pre = [a], []
        n_layers = len(spec.hidden_dims) + 1
        for i in range(n_layers):
            z = a @ P[f"layer{i}.W"] + P[f"layer{i}.b"]
            if i < n_layers - 1:
                pre.append(z)
                a = _act(z, spec.activation)
                acts.append(a)
            else:
                a = z
        self.counter.forward += 1
        if not keep_cache:
            return a
        return a, {"acts": acts, "pre": pre, "phi": (phi_t, phi_s, phi_w), "idx": idx,
                   "params": params}

    def forward(self, x, t, s=None, w=None, label=None):
        return self.apply(self.params, x, t, s, w, label)

    def backward(self, cache, dout) -> np.ndarray:
        """Vector-Jacobian product of the output with respect to the parameters."""
        spec = self.spec
        P = self.unflatten(cache["params"])
        grad = np.zeros(spec.num_params)
        G = self.unflatten(grad)
        acts, pre = cache["acts"], cache["pre"]
        g = np.asarray(dout, dtype=np.float64)
        n_layers = len(spec.hidden_dims) + 1
        for i in reversed(range(n_layers)):
            G[f"layer{i}.W"][...] = acts[i].T @ g
            G[f"layer{i}.b"][...] = g.sum(axis=0)
            g = g @ P[f"layer{i}.W"].T
            if i > 0:
                g = g * _act_grad(pre[i - 1], spec.activation)
        dh = g[:, spec.input_dim:]
        phi_t, phi_s, phi_w = cache["phi"]
        if cache["idx"] is not None:
            np.add.at(G["class_emb"], cache["idx"], dh)
        if spec.use_w:
            G["w_emb.W"][...] = phi_w.T @ dh
            G["w_emb.b"][...] = dh.sum(axis=0)
        if spec.use_s:
            dh = dh / 2
            G["s_emb.W"][...] = phi_s.T @ dh
            G["s_emb.b"][...] = dh.sum(axis=0)
        G["t_emb.W"][...] = phi_t.T @ dh
        G["t_emb.b"][...] = dh.sum(axis=0)
        self.counter.backward += 1
        return grad

    def __call__(self, x, t, s=None, w=None, label=None):
        return self.forward(x, t, s, w, label)


def tangent_spec(spec: NetSpec) -> NetSpec:
    """Single-time twin of a secant architecture."""
    return replace(spec, use_s=False, use_w=False)


def init_from_tangent(tangent_params, tangent: NetSpec, secant: NetSpec) -> SecantNet:
    """Secant net whose f(x, t, t) equals the tangent net's v(x, t) exactly.

    The s projection is cloned from the t projection; a new guidance pathway
    and a class table missing from the tangent start at zero.
    """
    if tangent.use_s or tangent.use_w:
        raise ConfigError("tangent net must be single-time and unguided")
    if not secant.use_s:
        raise ConfigError("secant architecture must take the s input")
    same = ("input_dim", "hidden_dims", "num_frequencies", "max_frequency", "embed_dim", "activation")
    for key in same:
        if getattr(tangent, key) != getattr(secant, key):
            raise ConfigError(f"architecture mismatch in {key}: "
                              f"{getattr(tangent, key)!r} vs {getattr(secant, key)!r}")
    if tangent.num_classes and tangent.num_classes != secant.num_classes:
        raise ConfigError("tangent and secant nets disagree on num_classes")
    src = SecantNet(tangent, np.asarray(tangent_params, dtype=np.float64))
    net = SecantNet(secant, np.zeros(secant.num_params))
    S, D = src.unflatten(src.params), net.unflatten(net.params)
    for name, view in S.items():
        D[name][...] = view
    D["s_emb.W"][...] = S["t_emb.W"]
    D["s_emb.b"][...] = S["t_emb.b"]
    return net


def grad_check(loss_grad, params, h: float = 1e-5, n_coords: int = 200, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``loss_grad(params) -> (value, grad)``; the check perturbs a random subset
    of ``n_coords`` coordinates (all of them if the vector is shorter).
    """
    params = np.array(params, dtype=np.float64, copy=True)
    value, grad = loss_grad(params)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite loss or gradient in grad_check (loss={value!r})")
    rng = make_rng((seed, 7002))
    k = min(n_coords, len(params))
    coords = np.sort(rng.choice(len(params), size=k, replace=False))
    scale = max(np.abs(grad).max(), 1.0)
    worst = 0.0
    for i in coords:
        old = params[i]
        params[i] = old + h
        fp = loss_grad(params)[0]
        params[i] = old - h
        fm = loss_grad(params)[0]
        params[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite loss while perturbing coordinate {i}")
        fd = (fp - fm) / (2 * h)
        denom = max(abs(grad[i]), abs(fd), floor * scale)
        worst = max(worst, abs(grad[i] - fd) / denom)
    return float(worst)
