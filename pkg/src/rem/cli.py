"""Command-line entry point: ``rem train | eval | convert | synth``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Config files are flat ``key=value`` text using the flag names (``latent-dim=20``);
``#`` starts a comment. Flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .data import DataFormatError, load_dataset, subset, write_matrix
from .evaluation import estimate_log_likelihood, evaluation_matrix
from .models import LinearGaussianModel
from .trainer import METHODS, RunConfig, TrainingAborted, load_state, train

log = logging.getLogger("rem")

# flag name -> (RunConfig field, type)
RUN_FLAGS = {
    "method": ("method", str),
    "dataset": ("dataset", str),
    "k": ("k", int),
    "latent-dim": ("latent_dim", int),
    "epochs": ("epochs", int),
    "batch": ("batch", int),
    "lr": ("lr", float),
    "epsilon": ("epsilon", float),
    "seed": ("seed", int),
    "subset": ("subset", int),
    "eval-k": ("eval_k", int),
    "out": ("out", str),
    "workers": ("workers", int),
    "hidden": ("hidden", int),
    "eval-every": ("eval_every", int),
    "checkpoint-every": ("checkpoint_every", int),
    "model": ("model", str),
}


class UsageError(Exception):
    pass


def parse_config_file(path) -> dict:
    """Read ``key=value`` lines into RunConfig field values."""
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = key.replace("_", "-")
        if flag not in RUN_FLAGS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        name, typ = RUN_FLAGS[flag]
        if value.lower() in ("", "none"):
            values[name] = None
            continue
        try:
            values[name] = typ(value)
        except ValueError:
            raise UsageError(f"{path}:{n}: bad value {value!r} for {key}") from None
    return values


def format_config_file(config: RunConfig) -> str:
    d = config.to_dict()
    lines = []
    for flag, (name, _) in RUN_FLAGS.items():
        v = d[name]
        lines.append(f"{flag}={'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def resolve_config(args) -> RunConfig:
    values = RunConfig().to_dict()
    if args.config:
        values.update(parse_config_file(args.config))
    for flag, (name, _) in RUN_FLAGS.items():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    config = RunConfig.from_dict(values)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return config


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(json.dumps(config.echo(), sort_keys=True).encode()).hexdigest()


def new_run_dir(parent, config: RunConfig) -> Path:
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{stamp}-{config_hash(config)[:8]}"
    for i in range(1000):
        path = parent / (base if i == 0 else f"{base}-{i}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not create a fresh run directory under {parent}")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _load(dataset_id: str, data_dir):
    try:
        return load_dataset(dataset_id, data_dir)
    except (FileNotFoundError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise UsageError(f"dataset {dataset_id!r}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = resolve_config(args)
    dataset = _load(config.dataset, args.data_dir)
    if config.subset is not None:
        try:
            dataset = subset(dataset, config.subset, config.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    run_dir = new_run_dir(config.out, config)
    started = _now()
    (run_dir / "config.txt").write_text(format_config_file(config))
    state = load_state(args.resume, config) if args.resume else None
    result = train(config, dataset, state=state, run_dir=run_dir)
    artifacts = {
        "config": str(run_dir / "config.txt"),
        "metrics": str(run_dir / "metrics.csv"),
        "checkpoints": [str(p) for p in result.checkpoints],
    }
    if result.last_report is not None:
        artifacts["eval"] = str(result.last_report.write(run_dir / "eval_test.json", run_dir / "nll_test.txt"))
        artifacts["nll_per_point"] = str(run_dir / "nll_test.txt")
    manifest = {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "engine_version": __version__,
        "started": started,
        "finished": _now(),
        "dataset_provenance": dataset.provenance,
        "artifacts": artifacts,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    summary = f"run {run_dir}"
    if result.last_report is not None:
        summary += f" test NLL {result.last_report.nll_mean:.4f}"
    print(summary)
    return 0


def cmd_eval(args) -> int:
    state = load_state(args.checkpoint)
    config = state.config
    dataset_id = args.dataset or config.dataset
    dataset = _load(dataset_id, args.data_dir)
    if dataset.dim != state.data_dim:
        raise UsageError(f"dataset has dimension {dataset.dim}, checkpoint expects {state.data_dim}")
    K = args.eval_k or config.eval_k
    seed = config.seed if args.seed is None else args.seed
    x = evaluation_matrix(dataset, args.split, seed)
    report = estimate_log_likelihood(state.pair.model, state.pair.encoder, x, K, seed, method=config.method,
                                     dataset=dataset_id, split=args.split, workers=args.workers)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.split}_k{K}_seed{seed}"
    path = report.write(out / f"{stem}.json", out / f"{stem}_nll.txt")
    print(f"{config.method} {dataset_id} {args.split} K={K} seed={seed} NLL {report.nll_mean:.4f} "
          f"KL {report.kl_to_prior:.4f} degenerate {report.degenerate_count} -> {path}")
    return 0


def cmd_convert(args) -> int:
    from .data import convert_idx

    info = convert_idx(args.idx, args.output, mode=args.mode)
    print(f"wrote {info['n']} x {info['dims']} ({info['mode']}) to {args.output}")
    return 0


def cmd_synth(args) -> int:
    if not args.sigma2 > 0:
        raise UsageError(f"--sigma2 must be positive, got {args.sigma2}")
    for name in ("data_dim", "latent_dim"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
    if args.n < 0 or args.n_test < 0:
        raise UsageError("--n and --n-test must be non-negative")
    rng = np.random.default_rng(args.seed)
    model = LinearGaussianModel.random(args.data_dim, args.latent_dim, args.sigma2, rng, scale=args.loading_scale)
    x, _ = model.sample(args.n + args.n_test, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "train.txt", x[:args.n])
    write_matrix(out / "test.txt", x[args.n:])
    lm_train, lm_test = model.log_marginal(x[:args.n]), model.log_marginal(x[args.n:])
    meta = {
        "data_dim": args.data_dim,
        "latent_dim": args.latent_dim,
        "sigma2": args.sigma2,
        "loading_scale": args.loading_scale,
        "seed": args.seed,
        "n": args.n,
        "n_test": args.n_test,
        "A": model.A.tolist(),
        "log_marginal_train_mean": math.fsum(lm_train.tolist()) / max(args.n, 1),
        "log_marginal_test_mean": math.fsum(lm_test.tolist()) / max(args.n_test, 1),
        "log_marginal_train": lm_train.tolist(),
        "log_marginal_test": lm_test.tolist(),
    }
    (out / "generating_model.json").write_text(json.dumps(meta, indent=1) + "\n")
    print(f"wrote synth:{out} (train log marginal mean {meta['log_marginal_train_mean']:.6f})")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rem", description="Reweighted EM, VAE and IWAE for deep latent-variable models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--dataset", help="mnist-fixed | mnist-stochastic | omniglot | synth:<dir>")
    for flag, (name, typ) in RUN_FLAGS.items():
        if flag in ("method", "dataset"):
            continue
        t.add_argument(f"--{flag}", dest=name, type=typ)
    t.add_argument("--data-dir", help="dataset root (default: $REM_DATA_DIR)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="estimate log-likelihood of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", help="defaults to the dataset the checkpoint was trained on")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--eval-k", dest="eval_k", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="output directory (default: next to the checkpoint)")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--data-dir", help="dataset root (default: $REM_DATA_DIR)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("convert", help="IDX image file to the canonical text format")
    c.add_argument("idx")
    c.add_argument("output")
    c.add_argument("--mode", choices=("gray", "binary"), default="gray")
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("synth", help="write a linear-Gaussian synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--data-dim", type=int, default=10)
    s.add_argument("--latent-dim", type=int, default=3)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--sigma2", type=float, default=0.5)
    s.add_argument("--loading-scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=2019)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rem {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, checkpoint.CheckpointError, DataFormatError, FloatingPointError,
            np.linalg.LinAlgError, OSError) as exc:
        print(f"rem {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
