"""Command-line entry point: ``stabnet split|train|eval|gradcheck``.

Exit codes: 0 success, 2 parameter/config error, 3 I/O or parse error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import RunConfig
from .data import Dataset, SplitManifest, load_mnist_dir, make_blobs, make_split
from .errors import ConfigError, NumericError, StabnetError
from .layers import StochasticMode
from .rng import RngStreams
from .trainer import evaluate, load_checkpoint, metrics_csv, save_checkpoint, train

log = logging.getLogger("stabnet")

EXIT_OK, EXIT_PARAM, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and test sets described by a run config."""
    kind = cfg.as_str("dataset")
    if kind == "mnist":
        data_dir = cfg.path("data_dir")
        if data_dir is None or not data_dir.is_dir():
            raise FileNotFoundError(f"MNIST directory not found: {data_dir}")
        train_ds, test_ds = load_mnist_dir(data_dir, "train"), load_mnist_dir(data_dir, "test")
    elif kind == "blobs":
        centers = cfg.blob_centers()
        seed = cfg.as_int("data_seed")
        streams = RngStreams(seed)
        args = (len(centers), centers, cfg.as_float("blobs_sigma"))
        train_ds = make_blobs(cfg.as_int("blobs_n_per_class"), *args, seed=streams.derive_seed("blobs-train"))
        test_ds = make_blobs(cfg.as_int("blobs_test_per_class"), *args, seed=streams.derive_seed("blobs-test"))
    else:
        raise ConfigError(f"dataset must be 'mnist' or 'blobs', got {kind!r}")
    test_count = cfg.opt_int("test_count")
    if test_count is not None:
        test_ds = test_ds.subset(np.arange(min(test_count, len(test_ds))))
    return train_ds, test_ds


def resolve_manifest(cfg: RunConfig, train_ds: Dataset) -> SplitManifest:
    path = cfg.path("manifest")
    if path is not None:
        return SplitManifest.load(path)
    return make_split(train_ds, cfg.as_int("per_class"), cfg.as_int("seed"), cfg.opt_int("unlabeled_count"))


def _dataset_from_arg(spec: str, split: str) -> Dataset:
    if spec == "blobs":
        return load_datasets(RunConfig({"dataset": "blobs"}))[0 if split == "train" else 1]
    path = Path(spec)
    if path.is_file():
        return load_datasets(RunConfig.load(path))[0 if split == "train" else 1]
    if not path.is_dir():
        raise FileNotFoundError(f"dataset not found: {spec}")
    return load_mnist_dir(path, split)


# ---------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    ds = _dataset_from_arg(args.dataset, "train")
    manifest = make_split(ds, args.per_class, args.seed, args.unlabeled_count)
    Path(args.out).write_text(manifest.to_text())
    hist = np.bincount(ds.y[manifest.labeled_idx], minlength=ds.num_classes)
    print(f"labeled {len(manifest.labeled_idx)}  unlabeled {len(manifest.unlabeled_idx)}")
    for c, count in enumerate(hist):
        print(f"class {c}: {count}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    train_ds, test_ds = load_datasets(cfg)
    manifest = resolve_manifest(cfg, train_ds)
    tcfg = cfg.train_config(train_ds.num_classes)
    out = cfg.path("out_dir")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
    manifest.save(out / "split.manifest")
    rows = []

    def on_epoch(row):
        rows.append(row)
        (out / "metrics.csv").write_text(metrics_csv(rows))

    try:
        result = train(tcfg, train_ds, manifest, test_ds, checkpoint_path=out / "last_good.ckpt", on_epoch=on_epoch)
    except NumericError as exc:
        print(f"numeric abort: {exc}; last good weights in {out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(result.net, out / "final.ckpt")
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    last = result.metrics[-1]
    print(f"trained {len(result.metrics)} epochs; final test error {last.test_error_pct:.2f}%  -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.passes < 1:
        print("--passes must be >= 1", file=sys.stderr)
        return EXIT_PARAM
    try:
        net = load_checkpoint(args.checkpoint)
    except (OSError, StabnetError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    ds = _dataset_from_arg(args.dataset, args.split)
    mode = StochasticMode.stochastic(args.seed, "eval") if args.stochastic else StochasticMode.deterministic()
    result = evaluate(net, ds, args.passes, mode)
    print(f"{result.error_pct:.2f}")
    if args.predictions_out:
        lines = ["index,label,predicted," + ",".join(f"p{c}" for c in range(result.probs.shape[1]))]
        for i, (label, probs) in enumerate(zip(ds.y, result.probs)):
            lines.append(f"{i},{label},{int(probs.argmax())}," + ",".join(f"{p:.6g}" for p in probs))
        Path(args.predictions_out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = gc.CHECKS if args.loss == "all" else (args.loss,)
    if any(c not in gc.CHECKS for c in checks):
        print(f"unknown check {args.loss!r}; choose from all, {', '.join(gc.CHECKS)}", file=sys.stderr)
        return EXIT_PARAM
    overall = 0.0
    for check in checks:
        errors = gc.run(check, args.trials, args.eps, args.seed)
        for i, err in enumerate(errors):
            print(f"{check} trial {i}: {err:.3e}")
        worst = max(errors)
        overall = max(overall, worst)
        print(f"{check}: max relative error {worst:.3e} over {len(errors)} trials")
    ok = overall <= gc.TOLERANCE
    print(f"overall: {overall:.3e} ({'PASS' if ok else 'FAIL'} at {gc.TOLERANCE:g})")
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stabnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a labeled/unlabeled split manifest")
    p.add_argument("--dataset", required=True, help="MNIST directory, a run config file, or 'blobs'")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled-count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="MNIST directory, a run config file, or 'blobs'")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--passes", type=int, default=1)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--predictions-out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--loss", required=True, help="ts|me|combined|xent|layer:<kind>|all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except StabnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
