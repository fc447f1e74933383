"""Training loop, Adam, EMA and the binary checkpoint container."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import make_rng, mixture_from_spec, sample_batch
from .errors import ConfigError, IntegrityError, NumericalError
from .interpolant import Interpolant
from .losses import LossKind, compute_loss, sample_loss_times
from .net import NetSpec, SecantNet, init_from_tangent
from .oracle import MixtureField, NetField
from .timesampling import RSampling, TimePairPolicy


def _doc(text, **kw):
    return field(metadata={"help": text}, **kw)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = _doc("diff | sdei | stei | sdee | stee | ct | cd", default="diff")
    lam: float = _doc("STEI weight of the diffusion term (>= 0)", default=1.0)
    delta: float = _doc("CT/CD finite-difference step (> 0)", default=1e-3)
    iterations: int = _doc("number of optimizer steps", default=20000)
    batch_size: int = _doc("samples per batch", default=128)
    lr: float = _doc("Adam learning rate", default=3e-4)
    beta1: float = _doc("Adam first-moment decay", default=0.9)
    beta2: float = _doc("Adam second-moment decay", default=0.999)
    adam_eps: float = _doc("Adam denominator epsilon", default=1e-8)
    ema_rate: float = _doc("EMA decay in [0, 1)", default=0.999)
    seed: int = _doc("master seed for init, batches and times", default=0)
    dataset: str = _doc("preset (point, gauss1, ring8, cond2) or JSON component list", default="ring8")
    interpolant: str = _doc("linear | trig", default="linear")
    eps1: float = _doc("trig lower time clip", default=0.001)
    eps2: float = _doc("trig upper time clip", default=0.00625)
    n_steps: int = _doc("target number of sampling steps N; caps |s - t|", default=4)
    t_mode: str = _doc("continuous | discrete (discrete only for sdei/stei)", default="continuous")
    bidirectional: bool = _doc("draw pairs with s < t half of the time", default=False)
    p_mean: float = _doc("trig log-sigma proposal mean", default=-1.0)
    p_std: float = _doc("trig log-sigma proposal std", default=1.4)
    r_mode: str = _doc("uniform | trunc_normal interior-point sampling", default="uniform")
    r_mu: float = _doc("truncated-normal mean on [0, 1]", default=0.5)
    r_sigma: float = _doc("truncated-normal scale", default=0.5)
    teacher: str = _doc("analytic | none | path to a tangent checkpoint", default="none")
    init: str = _doc("scratch | path to a tangent checkpoint", default="scratch")
    hidden_dims: tuple = _doc("comma-separated hidden widths", default=(128, 128, 128))
    num_frequencies: int = _doc("sinusoidal time features per input", default=8)
    max_frequency: float = _doc("largest sinusoid frequency", default=32.0)
    embed_dim: int = _doc("width of the learned time embedding", default=64)
    activation: str = _doc("silu | tanh", default="silu")
    guidance: str = _doc("none | embedded (w as input) | separate (label dropout)", default="none")
    w_min: float = _doc("lower end of the guidance-scale training range", default=1.0)
    w_max: float = _doc("upper end of the guidance-scale training range", default=3.0)
    label_dropout: float = _doc("probability of replacing a label by the null class", default=0.1)
    checkpoint_every: int = _doc("write ckpt-<iter>.bin every k iterations (0: final only)", default=0)
    log_wall_time: bool = _doc("fill the wall_ms metrics column (breaks byte-identical CSVs)",
                               default=False)

    def __post_init__(self):
        LossKind(self.loss, self.lam, self.delta)
        object.__setattr__(self, "loss", self.loss.lower())
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.adam_eps > 0:
            raise ConfigError("lr and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.ema_rate < 1:
            raise ConfigError("ema_rate must lie in [0, 1)")
        if self.guidance not in ("none", "embedded", "separate"):
            raise ConfigError(f"unknown guidance mode {self.guidance!r}")
        if self.w_min > self.w_max:
            raise ConfigError("w_min must not exceed w_max")
        if not 0 <= self.label_dropout <= 1:
            raise ConfigError("label_dropout must lie in [0, 1]")
        kind = self.loss_kind
        if kind.needs_teacher and self.teacher == "none":
            raise ConfigError(f"loss {self.loss} is a distillation loss and needs a teacher")
        if self.loss == "stee" and self.teacher != "none":
            raise ConfigError("STEE trains without a teacher; set teacher = none")
        if self.t_mode == "discrete" and self.loss not in ("sdei", "stei", "diff"):
            raise ConfigError("discrete t sampling is only valid with the interior-point losses")
        if self.guidance == "embedded" and self.loss in ("stee", "diff"):
            raise ConfigError(f"embedded guidance is not available for loss {self.loss}; "
                              "use guidance = separate")
        # Remaining policy checks.
        self.policy
        self.r_sampling
        self.ip

    @property
    def loss_kind(self) -> LossKind:
        return LossKind(self.loss, self.lam, self.delta)

    @property
    def ip(self) -> Interpolant:
        return Interpolant(self.interpolant, self.eps1, self.eps2)

    @property
    def policy(self) -> TimePairPolicy:
        return TimePairPolicy(self.n_steps, self.t_mode, self.bidirectional, self.p_mean, self.p_std)

    @property
    def r_sampling(self) -> RSampling:
        return RSampling(self.r_mode, self.r_mu, self.r_sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- optimizer -----------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    k: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(state: OptimizerState, params, grads, lr: float, betas=(0.9, 0.999),
                   eps: float = 1e-8):
    """Bias-corrected Adam; returns (new state, new params) without mutating inputs."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ConfigError("optimizer state, params and grads must share one shape")
    b1, b2 = betas
    k = state.k + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads**2
    m_hat = m / (1 - b1**k)
    v_hat = v / (1 - b2**k)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptimizerState(m, v, k), new_params


def ema_update(ema_params, params, rate: float):
    if not 0 <= rate < 1:
        raise ConfigError("EMA rate must lie in [0, 1)")
    return rate * np.asarray(ema_params) + (1 - rate) * np.asarray(params)


# -- checkpoints ---------------------------------------------------------

MAGIC = b"SECKPT\x00\x00"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    spec: NetSpec
    params: np.ndarray
    ema: np.ndarray
    opt: OptimizerState
    iteration: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # e.g. loss kind, bidirectional

    @property
    def bidirectional(self) -> bool:
        return bool(self.meta.get("bidirectional", False))

    def net(self, use_ema: bool = False) -> SecantNet:
        return SecantNet(self.spec, np.array(self.ema if use_ema else self.params))

    def _arrays(self):
        return [("params", self.params), ("ema", self.ema), ("opt.m", self.opt.m), ("opt.v", self.opt.v)]

    def to_bytes(self) -> bytes:
        arrays = self._arrays()
        header = {
            "arrays": [[name, int(a.size)] for name, a in arrays],
            "config": self.config,
            "iteration": int(self.iteration),
            "meta": self.meta,
            "opt_k": int(self.opt.k),
            "rng_state": self.rng_state,
            "spec": self.spec.to_dict(),
        }
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hdr)), hdr]
        body += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
        blob = b"".join(body)
        return blob + hashlib.sha256(blob).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        fixed = len(MAGIC) + 12
        if len(data) < fixed:
            raise IntegrityError("checkpoint truncated inside the fixed header", len(data))
        if data[:len(MAGIC)] != MAGIC:
            raise IntegrityError("not a checkpoint file (bad magic)", 0)
        version, hlen = struct.unpack("<IQ", data[len(MAGIC):fixed])
        if version != FORMAT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version} "
                                 f"(expected {FORMAT_VERSION})", len(MAGIC))
        if len(data) < fixed + hlen:
            raise IntegrityError("checkpoint truncated inside the JSON header", len(data))
        try:
            header = json.loads(data[fixed:fixed + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"corrupt checkpoint header: {exc}", fixed) from None
        off = fixed + hlen
        arrays = {}
        for name, size in header["arrays"]:
            end = off + 8 * int(size)
            if len(data) < end:
                raise IntegrityError(f"checkpoint truncated inside array {name!r}", len(data))
            arrays[name] = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64)
            off = end
        if len(data) != off + _DIGEST:
            raise IntegrityError("checkpoint length does not match its header", min(len(data), off))
        if hashlib.sha256(data[:off]).digest() != data[off:]:
            raise IntegrityError("checkpoint checksum mismatch", off)
        spec = NetSpec.from_dict(header["spec"])
        opt = OptimizerState(arrays["opt.m"], arrays["opt.v"], int(header["opt_k"]))
        return cls(spec, arrays["params"], arrays["ema"], opt, int(header["iteration"]),
                   header["config"], header["rng_state"], header["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = ckpt.to_bytes()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_spec: NetSpec | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    ckpt = Checkpoint.from_bytes(data)
    if expected_spec is not None and expected_spec != ckpt.spec:
        diff = {k: (v, getattr(ckpt.spec, k)) for k, v in expected_spec.to_dict().items()
                if ckpt.spec.to_dict().get(k) != v}
        warnings.warn(f"checkpoint architecture differs from the configured one: {diff}",
                      stacklevel=2)
    return ckpt


# -- metrics -------------------------------------------------------------

METRIC_COLUMNS = ("iteration", "loss", "target_std", "n_forward", "n_backward", "wall_ms")


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, iteration, loss, std, n_forward, n_backward, wall_ms=None):
        self.rows.append((int(iteration), float(loss), float(std), int(n_forward), int(n_backward),
                          None if wall_ms is None else float(wall_ms)))

    def column(self, name: str) -> np.ndarray:
        i = METRIC_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for it, loss, std, nf, nb, wall in self.rows:
            w = "" if wall is None else f"{wall:.3f}"
            lines.append(f"{it},{loss!r},{std!r},{nf},{nb},{w}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


# -- training ------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: MetricsLog
    outputs: list = field(default_factory=list)  # LossOutputs when keep_outputs is set


def _net_spec(cfg: TrainConfig, mix) -> NetSpec:
    return NetSpec(
        input_dim=mix.dim, hidden_dims=cfg.hidden_dims, num_frequencies=cfg.num_frequencies,
        max_frequency=cfg.max_frequency, embed_dim=cfg.embed_dim,
        use_s=cfg.loss != "diff", use_w=cfg.guidance == "embedded",
        num_classes=mix.num_classes, activation=cfg.activation,
    )


def load_teacher(source: str, mix, ip: Interpolant):
    if source == "none":
        return None
    if source == "analytic":
        return MixtureField(mix, ip)
    ckpt = load_checkpoint(source)
    net = ckpt.net(use_ema=True)
    if net.spec.use_s:
        raise ConfigError(f"teacher checkpoint {source!r} is not a tangent (single-time) model")
    return NetField(net)


def build_net(cfg: TrainConfig, mix) -> SecantNet:
    spec = _net_spec(cfg, mix)
    if cfg.init == "scratch":
        return SecantNet(spec, seed=cfg.seed)
    ckpt = load_checkpoint(cfg.init)
    if not spec.use_s:
        if ckpt.spec != spec:
            raise ConfigError("initial checkpoint does not match the configured architecture")
        return SecantNet(spec, np.array(ckpt.ema))
    return init_from_tangent(ckpt.ema, ckpt.spec, spec)


def _dump_batch(run_dir, iteration, batch, times, out):
    if run_dir is None:
        return None
    path = Path(run_dir) / f"nonfinite-{iteration}.npz"
    arrays = {"x0": batch.x0, "z": batch.z, "t": times.t, "s": times.s,
              "targets": out.targets, "predictions": out.predictions}
    if times.r is not None:
        arrays["r"] = times.r
    if batch.labels is not None:
        arrays["labels"] = batch.labels
    np.savez(path, **arrays)
    return path


def train(cfg: TrainConfig, run_dir=None, keep_outputs: bool = False, callback=None) -> TrainResult:
    """Run ``cfg.iterations`` optimizer steps; deterministic given the config.

    Each iteration uses a fresh stop-gradient snapshot of the current
    parameters. Batches are keyed by (seed, iteration), so runs with
    different losses but one seed see identical data.
    """
    mix = mixture_from_spec(cfg.dataset)
    ip = cfg.ip
    kind = cfg.loss_kind
    if kind.end_point and not cfg.bidirectional:
        warnings.warn("end-point losses evaluate the frozen net in both time orders; "
                      "bidirectional = true is recommended", stacklevel=2)
    teacher = load_teacher(cfg.teacher, mix, ip) if kind.needs_teacher else None
    net = build_net(cfg, mix)
    policy, r_mode = cfg.policy, cfg.r_sampling
    dropout = cfg.label_dropout if mix.num_classes else 0.0
    params = net.params.copy()
    ema = params.copy()
    opt = OptimizerState.zeros(len(params))
    log = MetricsLog()
    outputs = []
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(it):
        meta = {"loss": cfg.loss, "bidirectional": bool(cfg.bidirectional),
                "guidance": cfg.guidance, "interpolant": cfg.interpolant}
        return Checkpoint(net.spec, params.copy(), ema.copy(),
                          OptimizerState(opt.m.copy(), opt.v.copy(), opt.k), it,
                          cfg.to_dict(), {"seed": cfg.seed, "next_iteration": it}, meta)

    for it in range(cfg.iterations):
        start = time.perf_counter()
        net.params = params
        frozen = net.snapshot(it)
        batch = sample_batch(mix, cfg.batch_size, dropout, (cfg.seed, 1, it))
        times = sample_loss_times(kind, policy, ip, r_mode, make_rng((cfg.seed, 2, it)),
                                  cfg.batch_size)
        w = None
        if net.spec.use_w:
            w = make_rng((cfg.seed, 3, it)).uniform(cfg.w_min, cfg.w_max, cfg.batch_size)
        out = compute_loss(kind, net, frozen, teacher, batch, ip, times, w=w)
        if not (np.isfinite(out.value) and np.all(np.isfinite(out.grads))):
            path = _dump_batch(run_dir, it, batch, times, out)
            where = f"; batch written to {path}" if path else ""
            raise NumericalError(f"non-finite loss {out.value!r} at iteration {it}{where}")
        opt, params = optimizer_step(opt, params, out.grads, cfg.lr, (cfg.beta1, cfg.beta2),
                                     cfg.adam_eps)
        ema = ema_update(ema, params, cfg.ema_rate)
        wall = (time.perf_counter() - start) * 1e3 if cfg.log_wall_time else None
        log.append(it, out.value, float(np.std(out.targets)), out.n_forward, out.n_backward, wall)
        if keep_outputs:
            outputs.append(out)
        if callback is not None:
            callback(it, out)
        if run_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint(it + 1), run_dir / f"ckpt-{it + 1}.bin")
    net.params = params
    final = checkpoint(cfg.iterations)
    if run_dir is not None:
        log.write(run_dir / "metrics.csv")
        save_checkpoint(final, run_dir / "ckpt-final.bin")
    return TrainResult(final, log, outputs)
