"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence. Subcommands:

  generate          build the synthetic cohort and print the manifest digest
  run               train/evaluate folds for one or both models
  stats             mean +/- std and paired one-sided t-tests over a fold CSV
  augment-preview   write augmented copies of one volume plus center slices
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from .cohort import load_volume, save_volume
from .errors import ConfigurationError, ContractError, DataFormatError
from .experiment import (ExperimentConfig, column_stats, generate_to_disk,
                         run_experiment)
from .gin import GinConfig, augment, sample_gin, write_center_slice_pgm
from .rng import RngStream
from .training import TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

FIXTURE_NAME = "example_fold_accuracies.csv"


def fixture_path() -> Path:
    return Path(str(resources.files("kneedg").joinpath("data", FIXTURE_NAME)))


def cmd_generate(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    manifest, digest = generate_to_disk(config)
    print(f"wrote {manifest}")
    print(f"manifest digest {digest}")
    return EXIT_OK


def _parse_folds(text, n_folds: int):
    if text is None:
        return None
    indices = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            indices.append(int(part))
        except ValueError:
            raise ConfigurationError(f"--folds: {part!r} is not an integer")
    for i in indices:
        if not 0 <= i < n_folds:
            raise ConfigurationError(f"--folds: fold {i} out of range 0..{n_folds - 1}")
    if not indices:
        raise ConfigurationError("--folds: no fold indices given")
    return indices


def cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    models = ["baseline", "proposed"] if args.model == "both" else [args.model]
    fold_indices = _parse_folds(args.folds, config.n_folds)
    if args.jobs < 1:
        raise ConfigurationError(f"--jobs: must be >= 1, got {args.jobs}")
    results, failures = run_experiment(config, models, fold_indices, jobs=args.jobs)
    for model in models:
        for row in sorted(results[model], key=lambda r: r["fold"]):
            cells = " ".join(f"{s}={row[s]:.4f}" for s in
                             ("source_val", "target_val", "source_test", "target_test"))
            print(f"{model} fold {row['fold']}: {cells}")
    for model, fold, exc in failures:
        print(f"{model} fold {fold} failed: {exc}", file=sys.stderr)
    if any(isinstance(exc, TrainingDivergedError) for _, _, exc in failures):
        return EXIT_DIVERGED
    if failures:
        return EXIT_DATA
    return EXIT_OK


def cmd_stats(args) -> int:
    path = Path(args.csv) if args.csv else fixture_path()
    if not path.exists():
        raise DataFormatError(f"stats input not found: {path}")
    stats, pairs = column_stats(path)
    for name, (mean, std) in stats.items():
        print(f"{name}: {mean:.4f} +/- {std:.4f}")
    for name, t, p in pairs:
        print(f"{name}: t={t:.4f} p={p:.6e}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    if args.k < 1:
        raise ConfigurationError(f"--k: need at least one view, got {args.k}")
    volume = load_volume(args.volume)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = GinConfig()
    rng = RngStream(args.seed, "preview")
    for i in range(args.k):
        g = sample_gin(rng, config)
        alpha = float(rng.uniform())
        view = augment(volume, g, alpha, config)
        save_volume(view, out_dir / f"view-{i:02d}.dgv")
        write_center_slice_pgm(view, out_dir / f"view-{i:02d}.pgm")
        print(f"view {i}: alpha={alpha:.6f}")
    print(f"wrote {args.k} views to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kneedg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic cohort to disk")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train and evaluate folds")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--model", choices=["baseline", "proposed", "both"], default="both")
    p.add_argument("--folds", default=None,
                   help="comma-separated fold indices (default: all)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stats", help="summarize a per-fold accuracy CSV")
    p.add_argument("--csv", default=None,
                   help=f"input CSV (default: packaged {FIXTURE_NAME})")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("augment-preview", help="augment one volume k times")
    p.add_argument("--volume", required=True, help="input .dgv volume")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=5, help="number of views")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
