"""Target-stability comparison: per-iteration regression-target std per loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .trainer import TrainConfig, train

SHARED_KEYS = ("dataset", "interpolant", "eps1", "eps2", "seed", "batch_size", "iterations")


@dataclass
class StabilityResult:
    kinds: list
    target_std: dict  # kind label -> per-iteration std array
    losses: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        """Time-averaged target std per loss kind."""
        return {k: float(np.mean(v)) for k, v in self.target_std.items()}

    def to_csv(self) -> str:
        lines = ["iteration,loss_kind,target_std"]
        n = len(next(iter(self.target_std.values()))) if self.target_std else 0
        for it in range(n):
            for k in self.kinds:
                lines.append(f"{it},{k},{float(self.target_std[k][it])!r}")
        for k in self.kinds:
            lines.append(f"mean,{k},{self.summary[k]!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _label(cfg: TrainConfig) -> str:
    return "STEI-secant" if cfg.loss == "stei" else cfg.loss_kind.label


def stability_run(configs, iterations: int | None = None) -> StabilityResult:
    """Train one model per config on matched batches and record target std.

    All configs must share dataset, interpolant, seed, batch size and
    iteration count, so that iteration k draws the same (x0, z) for every
    loss. For STEI the recorded target is the secant term's.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("stability_run needs at least one config")
    if iterations is not None:
        configs = [TrainConfig(**{**c.to_dict(), "iterations": iterations}) for c in configs]
    ref = configs[0]
    for c in configs[1:]:
        for key in SHARED_KEYS:
            if getattr(c, key) != getattr(ref, key):
                raise ConfigError(f"stability configs disagree on {key}: "
                                  f"{getattr(ref, key)!r} vs {getattr(c, key)!r}")
    labels = [_label(c) for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("each loss kind may appear only once in a stability run")
    stds, losses = {}, {}
    for cfg, label in zip(configs, labels):
        result = train(cfg)
        stds[label] = result.metrics.column("target_std")
        losses[label] = result.metrics.column("loss")
    return StabilityResult(labels, stds, losses)
