"""Command-line entry point: ``secantlab <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 configuration or input error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import describe_keys, echo_config, load_config
from .data import make_rng, mixture_from_spec, sample_batch
from .errors import (CapabilityError, ConfigError, IntegrityError, NumericalError,
                     SecantLabError, SingularityError)
from .interpolant import Interpolant
from .losses import LOSS_NAMES, LossKind, loss_grad_check, sample_loss_times
from .metrics import energy_distance, moment_error
from .net import NetSpec, SecantNet
from .oracle import ExactSecant, MixtureField, mc_secant, picard_iterate, secant_oracle
from .sampler import GUIDANCE_MODES, NetModel, SamplePlan, baseline_solve, generate, invert
from .stability import stability_run
from .timesampling import RSampling, TimePairPolicy, sample_pair
from .trainer import TrainConfig, load_checkpoint, train

EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERICAL = 2, 3, 4

TRAIN_COMMANDS = {
    "train-tangent": {"losses": ("diff",), "base": {"loss": "diff"}},
    "train-secant": {"losses": ("stei", "stee", "ct"), "base": {"loss": "stee", "bidirectional": True}},
    "distill": {"losses": ("sdei", "sdee", "cd"), "base": {"loss": "sdei", "teacher": "analytic"}},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- helpers -------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_run_dir(root, name: str) -> Path:
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{stamp}-{name}"
    k = 1
    while path.exists():
        path = root / f"{stamp}-{name}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def write_manifest(run_dir: Path, command: str, argv, seed) -> None:
    files = {p.name: _sha256(p) for p in sorted(run_dir.iterdir())
             if p.is_file() and p.name != "manifest"}
    manifest = {
        "command": command, "argv": list(argv), "seed": seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "versions": {"secantlab": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "files": files,
    }
    (run_dir / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_samples(path, x, header: str) -> None:
    x = np.atleast_2d(x)
    cols = ",".join(f"x{i}" for i in range(x.shape[1]))
    lines = [f"# plan: {header}", cols]
    lines += [",".join(repr(float(v)) for v in row) for row in x]
    Path(path).write_text("\n".join(lines) + "\n")


def read_samples(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ConfigError(f"no sample rows in {path}")
    return np.array(rows)


def _ip_from_checkpoint(ckpt) -> Interpolant:
    cfg = ckpt.config
    return Interpolant(cfg.get("interpolant", "linear"), cfg.get("eps1", 0.001), cfg.get("eps2", 0.00625))


# -- commands ------------------------------------------------------------

def _cmd_train(args, command: str, argv) -> int:
    spec = TRAIN_COMMANDS[command]
    overrides = {k: getattr(args, k) for k in TrainConfig.keys()}
    cfg = load_config(args.config, overrides, base=spec["base"])
    if cfg.loss not in spec["losses"]:
        raise ConfigError(f"{command} accepts loss in {spec['losses']}, got {cfg.loss!r}")
    run_dir = make_run_dir(args.runs_dir, args.name or command)
    (run_dir / "config.echo").write_text(echo_config(cfg))
    train(cfg, run_dir=run_dir)
    write_manifest(run_dir, command, argv, cfg.seed)
    print(run_dir)
    return 0


def _model_and_ip(args):
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        net = ckpt.net(use_ema=not args.raw)
        ip = _ip_from_checkpoint(ckpt)
        return NetModel(net, bidirectional=ckpt.bidirectional), ip, net.spec.input_dim
    ip = Interpolant(args.interpolant)
    mix = mixture_from_spec(args.dataset)
    field = MixtureField(mix, ip)
    return ExactSecant(field, args.oracle_substeps), ip, mix.dim


def _plan(args, direction="generate") -> SamplePlan:
    mode = args.guidance_mode
    if mode is None:
        mode = "none" if args.guidance is None else "embedded"
    return SamplePlan(n_steps=args.steps, direction=direction, guidance=mode,
                      w=1.0 if args.guidance is None else args.guidance,
                      guidance_skip=args.guidance_skip, label=args.label, seed=args.seed, n=args.n)


def _cmd_sample(args) -> int:
    plan = _plan(args)
    if args.method in ("euler", "heun"):
        if args.ckpt:
            raise ConfigError("--method euler/heun integrates the analytic field; omit --ckpt")
        ip = Interpolant(args.interpolant)
        mix = mixture_from_spec(args.dataset)
        field = MixtureField(mix, ip)
        noise = make_rng((plan.seed, 9001)).standard_normal((plan.n, mix.dim))
        label = plan.label
        w = plan.w if plan.guidance != "none" else None
        x = baseline_solve(field, args.method, plan.n_steps, ip, noise, label=label, w=w)
    else:
        model, ip, dim = _model_and_ip(args)
        x = generate(model, plan, ip, dim=dim)
    header = json.dumps({**asdict(plan), "method": args.method,
                         "grid": ip.grid(plan.n_steps).tolist()}, sort_keys=True)
    write_samples(args.out, x, header)
    print(args.out)
    return 0


def _cmd_invert(args) -> int:
    plan = _plan(args, "invert")
    model, ip, _ = _model_and_ip(args)
    x = read_samples(args.input)
    z = invert(model, plan, ip, x)
    header = json.dumps({**asdict(plan), "grid": ip.grid(plan.n_steps, "invert").tolist()},
                        sort_keys=True)
    write_samples(args.out, z, header)
    print(args.out)
    return 0


def _cmd_eval(args) -> int:
    a, b = read_samples(args.a), read_samples(args.b)
    mean_gap, cov_gap = moment_error(a, b)
    print(f"energy_distance={energy_distance(a, b, seed=args.seed)!r}")
    print(f"mean_gap={mean_gap!r}")
    print(f"cov_gap={cov_gap!r}")
    print(f"n_a={len(a)}")
    print(f"n_b={len(b)}")
    return 0


def _cmd_stability(args, argv) -> int:
    kinds = [k.strip().lower() for k in args.losses.split(",") if k.strip()]
    configs = []
    for kind in kinds:
        base = {"loss": kind, "dataset": args.dataset, "interpolant": args.interpolant,
                "seed": args.seed, "iterations": args.iterations, "batch_size": args.batch_size,
                "n_steps": args.n_steps}
        base["teacher"] = "analytic" if LossKind(kind).needs_teacher else "none"
        if LossKind(kind).end_point:
            base["bidirectional"] = True
        configs.append(load_config(args.config, None, base=base))
    run_dir = make_run_dir(args.runs_dir, args.name or "stability")
    result = stability_run(configs)
    out = Path(args.out) if args.out else run_dir / "stability.csv"
    result.write(out)
    write_manifest(run_dir, "stability", argv, args.seed)
    for kind, value in result.summary.items():
        print(f"mean_target_std.{kind}={value!r}")
    print(out)
    return 0


def _cmd_oracle_check(args) -> int:
    ip = Interpolant(args.interpolant)
    mix = mixture_from_spec(args.dataset)
    field = MixtureField(mix, ip)
    rng = make_rng((args.seed, 9201))
    policy = TimePairPolicy(max(1, int(round((ip.bounds[1] - ip.bounds[0]) / args.h))))
    t, s = sample_pair(policy, ip, rng, args.pairs)
    batch = sample_batch(mix, args.pairs, 0.0, (args.seed, 9202))
    x = ip.noised(batch.x0, batch.z, t)
    oracle = secant_oracle(field, x, t, s, args.substeps)
    d = mix.dim
    head = ["t", "s"] + [f"oracle_{i}" for i in range(d)] + [f"mc_{i}" for i in range(d)]
    head += [f"mc_stderr_{i}" for i in range(d)] + [f"picard_err_{k}" for k in range(args.picard_iters + 1)]
    lines = [",".join(head)]
    for i in range(args.pairs):
        est, se = mc_secant(field, x[i], t[i], s[i], args.draws, RSampling(args.r_mode),
                            (args.seed, 9203, i), substeps=args.substeps)
        grid = np.linspace(t[i], s[i], args.picard_nodes)
        pic = picard_iterate(field, x[i], t[i], grid, args.picard_iters, max(16, args.substeps // 10))
        vals = [t[i], s[i], *oracle[i], *est, *se, *pic.sup_errors]
        lines.append(",".join(repr(float(v)) for v in vals))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_grad_check(args) -> int:
    ip = Interpolant(args.interpolant)
    mix = mixture_from_spec(args.dataset)
    kinds = LOSS_NAMES if args.loss == "all" else (args.loss,)
    spec = NetSpec(mix.dim, hidden_dims=(16, 16), num_frequencies=4, embed_dim=8,
                   num_classes=mix.num_classes)
    net = SecantNet(spec, seed=args.seed)
    net.params = net.params + make_rng((args.seed, 9301)).normal(0, 0.1, net.params.shape)
    batch = sample_batch(mix, 32, 0.2 if mix.num_classes else 0.0, (args.seed, 9302))
    teacher = MixtureField(mix, ip)
    worst = 0.0
    for name in kinds:
        kind = LossKind(name, delta=1e-2)
        times = sample_loss_times(kind, TimePairPolicy(4), ip, RSampling("trunc_normal"),
                                  make_rng((args.seed, 9303)), 32)
        err = loss_grad_check(kind, net, teacher, batch, ip, times, h=args.h)
        worst = max(worst, err)
        print(f"grad_check.{name}={err!r}")
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3g} >= {args.tol:g}")
    return 0


# -- parser --------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--runs-dir", default="runs", help="parent of the run directory")
    p.add_argument("--name", help="run name (default: the command)")
    for key, text, default in describe_keys():
        flag = "--" + key.replace("_", "-")
        aliases = [flag] + (["--steps"] if key == "n_steps" else [])
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        p.add_argument(*aliases, dest=key, default=None, metavar="V",
                       help=f"{text} [default: {default}]")


def _sample_flags(p, need_out=True):
    p.add_argument("--ckpt", help="checkpoint to sample from (default: exact secant of the analytic field)")
    p.add_argument("--raw", action="store_true", help="use raw instead of EMA parameters")
    p.add_argument("--dataset", default="ring8", help="mixture for analytic sampling")
    p.add_argument("--interpolant", default="linear", choices=("linear", "trig"))
    p.add_argument("--steps", type=int, default=4, help="number of uniform steps")
    p.add_argument("--guidance", type=float, default=None, help="guidance scale w")
    p.add_argument("--guidance-mode", choices=GUIDANCE_MODES, default=None,
                   help="none | embedded | separate (default: embedded if --guidance is set)")
    p.add_argument("--guidance-skip", type=int, default=0, help="initial steps with w = 1")
    p.add_argument("--label", type=int, default=None, help="class label for conditional models")
    p.add_argument("--n", type=int, default=1000, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-substeps", type=int, default=64,
                   help="RK4 substeps of the exact-secant model")
    p.add_argument("--out", required=need_out, help="output CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="secantlab", description="Tangent and secant models on toy distributions.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, doc in (("train-tangent", "train a velocity model with the diffusion loss"),
                      ("train-secant", "train a secant model without a teacher (stei, stee, ct)"),
                      ("distill", "distill a teacher into a secant model (sdei, sdee, cd)")):
        _train_flags(sub.add_parser(name, help=doc, description=doc))

    p = sub.add_parser("sample", help="generate samples")
    _sample_flags(p)
    p.add_argument("--method", choices=("secant", "euler", "heun"), default="secant",
                   help="secant model, or Euler/Heun on the analytic field")

    p = sub.add_parser("invert", help="map data samples back to noise")
    _sample_flags(p)
    p.add_argument("--input", required=True, help="CSV of data samples")

    p = sub.add_parser("eval", help="energy distance and moment gaps between two sample CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--seed", type=int, default=0, help="subsample seed for large sets")

    p = sub.add_parser("stability", help="target std per loss on matched batches")
    p.add_argument("--losses", default="ct,cd,sdei,stei,sdee,stee")
    p.add_argument("--dataset", default="ring8")
    p.add_argument("--interpolant", default="linear", choices=("linear", "trig"))
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--n-steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="shared config file for all runs")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--name")
    p.add_argument("--out", help="CSV path (default: stability.csv in the run directory)")

    p = sub.add_parser("oracle-check", help="compare secant oracle, Monte-Carlo and Picard estimates")
    p.add_argument("--dataset", default="point")
    p.add_argument("--interpolant", default="linear", choices=("linear", "trig"))
    p.add_argument("--pairs", type=int, default=5)
    p.add_argument("--h", type=float, default=0.3, help="maximum |s - t|")
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--r-mode", choices=("uniform", "trunc_normal"), default="uniform")
    p.add_argument("--substeps", type=int, default=1000)
    p.add_argument("--picard-iters", type=int, default=5)
    p.add_argument("--picard-nodes", type=int, default=201)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("grad-check", help="finite-difference check of loss gradients")
    p.add_argument("--loss", default="all", choices=("all",) + LOSS_NAMES)
    p.add_argument("--dataset", default="ring8")
    p.add_argument("--interpolant", default="linear", choices=("linear", "trig"))
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command in TRAIN_COMMANDS:
                return _cmd_train(args, args.command, argv)
            handler = {
                "sample": lambda: _cmd_sample(args),
                "invert": lambda: _cmd_invert(args),
                "eval": lambda: _cmd_eval(args),
                "stability": lambda: _cmd_stability(args, argv),
                "oracle-check": lambda: _cmd_oracle_check(args),
                "grad-check": lambda: _cmd_grad_check(args),
            }[args.command]
            return handler()
    except (NumericalError, SingularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CapabilityError, IntegrityError, SecantLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    raise SystemExit(run_command())


if __name__ == "__main__":
    main()
