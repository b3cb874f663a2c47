"""Command-line entry point: ``cnl gen-data | train | eval | gradcheck``.

Exit codes: 0 success, 1 gradient check failure, 2 bad flags or config,
3 missing or unreadable input, 4 training aborted on a non-finite loss.
"""

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import yaml

from . import __version__
from . import data as D
from . import gradcheck
from . import train as T
from .losses import ZeroNormError
from .model import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_INPUT, EXIT_NONFINITE = 0, 1, 2, 3, 4

logger = logging.getLogger("compound_norm")

# flat config keys mapping onto the augmentation presets
_AUG_KEYS = {f"{view}_{f.name}": (view, f.name)
             for view in ("weak", "strong") for f in dataclasses.fields(D.AugmentParams)}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _load_dataset(path) -> D.Dataset:
    try:
        return D.load_dataset(path)
    except FileNotFoundError as e:
        raise InputError(f"dataset not found: {path}") from e
    except (OSError, D.DatasetFormatError) as e:
        raise InputError(f"cannot read dataset {path}: {e}") from e


def read_config(path) -> dict:
    """Parse a flat ``key: value`` config file into a plain dict."""
    try:
        with open(path) as f:
            loaded = yaml.safe_load(f)
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise UsageError(f"malformed config {path}: {e}") from e
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise UsageError(f"config {path} must be a key-value mapping")
    return loaded


def merge_config(file_values: dict, flag_values: dict, env=os.environ) -> T.TrainConfig:
    """Defaults, then config file, then flags; ``CNL_SEED`` overrides the seed last."""
    fields = {f.name for f in dataclasses.fields(T.TrainConfig)} - {"weak", "strong"}
    merged, aug = {}, {"weak": dataclasses.asdict(D.WEAK), "strong": dataclasses.asdict(D.STRONG)}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is None:
                continue
            if key in _AUG_KEYS:
                view, name = _AUG_KEYS[key]
                aug[view][name] = value
            elif key in fields:
                merged[key] = value
            else:
                raise UsageError(f"unknown config key {key!r}")
    if env.get("CNL_SEED"):
        try:
            merged["seed"] = int(env["CNL_SEED"])
        except ValueError as e:
            raise UsageError(f"CNL_SEED must be an integer, got {env['CNL_SEED']!r}") from e
    if isinstance(merged.get("hidden"), (int, str)):
        merged["hidden"] = [int(h) for h in str(merged["hidden"]).split(",") if h.strip()]
    try:
        return T.TrainConfig(**merged, weak=D.AugmentParams(**aug["weak"]),
                             strong=D.AugmentParams(**aug["strong"]))
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def cmd_gen_data(args) -> int:
    if args.k < 2 or args.d < 1 or args.nmax < 1 or args.rho < 1 or args.test_per_class < 1:
        raise UsageError("need k >= 2, d >= 1, nmax >= 1, rho >= 1, test-per-class >= 1")
    if args.separation < 0:
        raise UsageError("separation must be non-negative")
    counts = D.longtail_counts(args.k, args.nmax, args.rho)
    ds = D.synth_clusters(args.k, args.d, counts, args.separation, args.seed, args.test_per_class)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_dataset(ds, out)
    D.export_csv(ds, out.with_suffix(".csv"))
    print("counts", " ".join(str(int(c)) for c in counts))
    return EXIT_OK


def _train_flags(args) -> dict:
    flags = {
        "norm": args.norm, "M": args.m, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "seed": args.seed, "w_cls": args.w_cls, "w_sim": args.w_sim,
        "sgd_momentum": args.sgd_momentum, "hidden": args.hidden,
    }
    if args.sbn is not None:
        flags["sbn"] = args.sbn == "on"
    for name in ("decouple", "resample", "reweight", "momentum_on_new", "sbn_cls_loss"):
        if getattr(args, name):
            flags[name] = True
    return flags


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    config = merge_config(file_values, _train_flags(args))
    dataset = _load_dataset(args.dataset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: str(out / name) for name in
             ("manifest.json", "metrics.csv", "summary.json", "checkpoint.json")}
    manifest = {
        "config": config.to_dict(),
        "dataset": str(args.dataset),
        "dataset_sha256": _sha256(args.dataset),
        "version": __version__,
        "revision": _revision(),
        "seed": config.seed,
        "outputs": paths,
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    with open(paths["manifest.json"], "w") as f:
        json.dump(manifest, f, indent=2)
    with T.RecordWriter(paths["metrics.csv"]) as writer:
        model, rows = T.run_training(dataset, config, on_row=writer)
    summary = T.summarize(rows)
    summary["manifest"] = paths["manifest.json"]
    with open(paths["summary.json"], "w") as f:
        json.dump(summary, f, indent=2)
    save_checkpoint(model, paths["checkpoint.json"], step=len(rows),
                    extra={"run_manifest": paths["manifest.json"]})
    print(json.dumps(summary["final"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError as e:
        raise InputError(f"checkpoint not found: {e.filename}") from e
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise InputError(f"cannot read checkpoint {args.checkpoint}: {e}") from e
    dataset = _load_dataset(args.dataset)
    if dataset.D != model.spec.input_dim or dataset.K != model.spec.K:
        raise InputError("dataset shape does not match the checkpoint")
    metrics = T.evaluate(model, dataset.x_test, dataset.y_test, dataset.train_counts)
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.tol <= 0 or args.instances < 1:
        raise UsageError("tol must be positive and instances at least 1")
    results = gradcheck.run_checks(args.seed, args.instances, rel_tol=args.tol, abs_tol=args.tol * 1e-2)
    print(f"{'check':<22}{'n':>4}{'max abs err':>14}{'max rel err':>14}  result")
    for r in results:
        print(f"{r.name:<22}{r.instances:>4}{r.max_abs_err:>14.3e}{r.max_rel_err:>14.3e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic long-tailed dataset")
    g.add_argument("--k", type=int, default=10, help="number of classes")
    g.add_argument("--d", type=int, default=16, help="feature dimension")
    g.add_argument("--rho", type=float, default=100.0, help="imbalance ratio N_max / N_min")
    g.add_argument("--nmax", type=int, default=500, help="training count of the largest class")
    g.add_argument("--separation", type=float, default=3.0, help="radius of the class-center sphere")
    g.add_argument("--test-per-class", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="dataset.cnld")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network and record per-epoch metrics")
    t.add_argument("dataset")
    t.add_argument("--config", help="flat key: value file using TrainConfig field names")
    t.add_argument("--out-dir", default="run")
    t.add_argument("--norm", choices=["bn", "cbn"])
    t.add_argument("--sbn", choices=["on", "off"])
    t.add_argument("--m", type=int, help="mixture components per layer")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--w-cls", type=float)
    t.add_argument("--w-sim", type=float)
    t.add_argument("--sgd-momentum", type=float)
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 64,64")
    t.add_argument("--decouple", action="store_true", help="classifier-only fine-tuning at the end")
    t.add_argument("--resample", action="store_true", help="class-balanced sampling while fine-tuning")
    t.add_argument("--reweight", action="store_true", help="inverse-frequency loss weights while fine-tuning")
    t.add_argument("--momentum-on-new", action="store_true", help="momentum weights the batch estimate")
    t.add_argument("--sbn-cls-loss", action="store_true", help="also apply the class loss to the split path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=gradcheck.REL_TOL, help="relative tolerance")
    c.add_argument("--instances", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (T.NonFiniteLossError, ZeroNormError, FloatingPointError) as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
