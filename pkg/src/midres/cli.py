"""Command-line entry point: ``midres {synth,train,eval,gradcheck,kfold}``.

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 verification failure (gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence


from . import checks
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FormatError, atomic_write_text, load_manifest, staged_directory, synth_dataset
from .model import VARIANTS, ConfigError, NetworkConfig, build_model, init_parameters
from .tensor import ShapeError
from .training import (METHOD_NAMES, TrainConfig, evaluate_accuracy, fit, kfold_run, loss_csv,
                       prepare_images, report_table)

log = logging.getLogger("midres")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    """Contents of a ``--config`` JSON file; omitted keys keep their defaults."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 5
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)

    PATH_KEYS = ("manifest", "out")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        known = {"network", "train", "k", "seed", "paths"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for section in ("network", "train", "paths"):
            if section in d and not isinstance(d[section], Mapping):
                raise ConfigError(f"config section {section!r} must be an object")
        train = dict(d.get("train", {}))
        if "seed" in train:
            raise ConfigError("set the seed at the top level of the config, not in 'train'")
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        k = d.get("k", 5)
        if isinstance(k, bool) or not isinstance(k, int) or k < 2:
            raise ConfigError(f"k must be an integer >= 2, got {k!r}")
        paths = dict(d.get("paths", {}))
        bad = sorted(set(paths) - set(cls.PATH_KEYS))
        if bad:
            raise ConfigError(f"unknown paths keys: {', '.join(bad)}")
        try:
            network = NetworkConfig.from_dict(d.get("network", {}))
            train_cfg = TrainConfig.from_dict({**train, "seed": seed})
        except TypeError as e:
            raise ConfigError(str(e)) from None
        return cls(network, train_cfg, k, seed, paths)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"config file {path} is not valid JSON ({e})") from None
        return cls.from_dict(d)


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    train_changes = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("momentum", "momentum"), ("precision", "precision")):
        value = getattr(args, flag, None)
        if value is not None:
            train_changes[key] = value
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.seed = seed
        train_changes["seed"] = seed
    if train_changes:
        cfg.train = cfg.train.replace(**train_changes)
    k = getattr(args, "k", None)
    if k is not None:
        if k < 2:
            raise ConfigError(f"k must be >= 2, got {k}")
        cfg.k = k
    return cfg


def _require(value: Any, flag: str) -> Any:
    if value is None:
        raise UsageError(f"{flag} is required (on the command line or in the config's paths section)")
    return value


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    if args.size < 16 or args.size % 2:
        raise UsageError(f"--size must be an even integer >= 16, got {args.size}")
    if args.per_class < 1:
        raise UsageError(f"--per-class must be positive, got {args.per_class}")
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    path = synth_dataset(args.per_class, args.size, args.classes, args.seed, args.out)
    print(f"wrote {args.per_class * args.classes} samples; manifest {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    manifest_path = _require(args.manifest or cfg.paths.get("manifest"), "--manifest")
    out = _require(args.out or cfg.paths.get("out"), "--out")
    net = cfg.network.replace(variant=args.variant) if args.variant else cfg.network
    manifest = load_manifest(manifest_path)
    _check_fit(net, manifest)
    images = prepare_images(manifest.load_images(), cfg.train)
    labels = manifest.labels

    model = init_parameters(build_model(net, cfg.train.dtype), cfg.seed)
    log.info("training %s (%d parameters) on %d samples for %d epochs",
             net.variant, model.param_count, len(labels), cfg.train.epochs)
    _, history = fit(model, images, labels, cfg.train,
                     on_epoch=lambda e, loss: log.info("epoch %d loss %.6f", e, loss))
    with staged_directory(out) as tmp:
        save_checkpoint(model, tmp, normalize=cfg.train.normalize)
        atomic_write_text(tmp / "loss.csv", loss_csv(history))
    final = f"{history[-1]:.6f}" if history else "n/a"
    print(f"checkpoint written to {out} (final loss {final})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    _check_fit(model.config, manifest)
    train_like = TrainConfig(normalize=meta["normalize"], precision=meta["precision"])
    images = prepare_images(manifest.load_images(), train_like)
    acc = evaluate_accuracy(model, images, manifest.labels)
    print(f"accuracy: {acc:.4f}")
    if args.csv:
        atomic_write_text(args.csv, f"manifest,accuracy\n{manifest.path},{acc!r}\n")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.cases == "all":
        names = list(checks.CASES)
    else:
        names = [n.strip() for n in args.cases.split(",") if n.strip()]
        unknown = [n for n in names if n not in checks.CASES]
        if unknown or not names:
            raise UsageError(f"unknown gradcheck case(s) {unknown}; valid names: all, {', '.join(checks.CASES)}")
    seeds = list(range(args.seed, args.seed + args.num_seeds))
    report = checks.run_cases(names, seeds, args.rel_tol)
    print(report.format_table())
    bad = report.failures()
    print(f"{len(report.rows) - len(bad)}/{len(report.rows)} rows PASS at rel-tol {args.rel_tol:g}")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_kfold(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    manifest_path = _require(args.manifest or cfg.paths.get("manifest"), "--manifest")
    out = args.out or cfg.paths.get("out")
    variants = list(VARIANTS) if args.variant == "both" else [args.variant or cfg.network.variant]
    manifest = load_manifest(manifest_path)
    smallest = min(manifest.census().values())
    if cfg.k > smallest:
        raise FormatError(f"k={cfg.k} exceeds the smallest class count ({smallest}) in {manifest.path}",
                          "undersized-class")

    results = []
    for variant in variants:
        net = cfg.network.replace(variant=variant)
        _check_fit(net, manifest)
        res = kfold_run(manifest, net, cfg.train, cfg.k)
        for f in res.folds:
            print(f"{variant} fold {f.fold_index}: train {f.train_size}, val {f.val_size}, "
                  f"accuracy {f.val_accuracy:.4f}")
        print(f"{variant} mean accuracy over {cfg.k} folds: {100 * res.mean_accuracy:.2f}%")
        results.append(res)
    table = report_table([(METHOD_NAMES[r.variant], r.mean_accuracy) for r in results])
    print()
    print(table.text, end="")
    if out:
        with staged_directory(out) as tmp:
            for r in results:
                atomic_write_text(tmp / f"folds_{r.variant}.csv", r.folds_csv())
            atomic_write_text(tmp / "summary.csv", table.csv)
            atomic_write_text(tmp / "summary.txt", table.text)
    return EXIT_OK


def _check_fit(net: NetworkConfig, manifest) -> None:
    expect = (net.input_channels, net.input_size, net.input_size)
    if tuple(manifest.shape) != expect:
        raise FormatError(f"manifest image shape {list(manifest.shape)} does not match network input {list(expect)}",
                          "shape-mismatch")
    if manifest.num_classes != net.num_classes:
        raise FormatError(f"manifest has {manifest.num_classes} classes, network expects {net.num_classes}",
                          "shape-mismatch")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config with sections network, train, k, seed, paths")
    p.add_argument("--manifest", help="dataset manifest (overrides paths.manifest)")
    p.add_argument("--epochs", type=int, help="training epochs (default 150)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 16)")
    p.add_argument("--lr", type=float, help="SGD learning rate (default 0.001)")
    p.add_argument("--momentum", type=float, help="classic momentum coefficient (default 0.9)")
    p.add_argument("--seed", type=int, help="seed for initialization, shuffling and fold assignment (default 0)")
    p.add_argument("--precision", choices=["float32", "float64"], help="training precision (default float64)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="midres", description="Train, evaluate and gradient-check MidResBlock and LeNet-style classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled image dataset",
                       description="Write synthetic single-channel images as tensor blobs plus a manifest.")
    p.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    p.add_argument("--per-class", type=int, default=10, help="images per class (default 10)")
    p.add_argument("--size", type=int, default=64, help="image side length, even and >= 16 (default 64)")
    p.add_argument("--classes", type=int, default=3, help="number of classes (default 3)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one network and write a checkpoint",
                       description="Train a network with SGD + momentum; writes CKPT/checkpoint.txt, "
                                   "CKPT/params/*.tnsb and CKPT/loss.csv (epoch,loss).")
    _training_flags(p)
    p.add_argument("--variant", choices=VARIANTS, help="network variant (default from config: midres_classifier)")
    p.add_argument("--out", help="checkpoint directory to create (overrides paths.out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report the accuracy of a checkpoint on a manifest",
                       description="Print the accuracy of a trained checkpoint on a dataset manifest.")
    p.add_argument("--ckpt", required=True, help="checkpoint directory written by 'train'")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--csv", help="also write a manifest,accuracy CSV row here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks",
                       description="Compare analytic gradients with central differences (h=1e-5, float64). "
                                   "Exit code 3 if any row fails.")
    p.add_argument("--cases", default="all", help=f"'all' or comma-separated names from: {', '.join(checks.CASES)}")
    p.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    p.add_argument("--num-seeds", type=int, default=1, help="number of consecutive seeds (default 1)")
    p.add_argument("--rel-tol", type=float, default=1e-4, help="relative error tolerance (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("kfold", help="stratified k-fold training and mean accuracy",
                       description="Run stratified k-fold cross-validation and print the mean accuracy table. "
                                   "With --out, writes folds_<variant>.csv (fold,val_accuracy), "
                                   "summary.csv (method,accuracy_percent) and summary.txt.")
    _training_flags(p)
    p.add_argument("--k", type=int, help="number of folds (default 5)")
    p.add_argument("--variant", choices=[*VARIANTS, "both"], help="variant(s) to run (default from config)")
    p.add_argument("--out", help="directory for fold and summary CSVs")
    p.set_defaults(func=cmd_kfold)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"midres {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, FileExistsError, FileNotFoundError, ValueError, OSError,
            FloatingPointError) as e:
        print(f"midres {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
