"""Experiment configuration, fold jobs, and cross-model summaries.

The JSON config fans out into per-(model, fold) training jobs whose
randomness derives from (seed, model, fold) labels, so results do not
depend on execution order or worker count. Baseline and proposed runs
share the cohort and the fold assignment file; the file's digest is
rechecked on every run so the paired comparison cannot silently drift.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .cohort import (CohortSpec, Domain, FoldSplit, StyleParams, generate_cohort,
                     load_manifest, make_folds, write_manifest)
from .errors import ConfigurationError, DataFormatError
from .gin import GinConfig
from .losses import LossConfig
from .metrics import (mean_std, paired_t_one_sided, write_confusion_csv, write_reports_csv,
                      confusion_grid)
from .network import NetConfig, NormKind, model_from_checkpoint
from .rng import RngStream
from .training import (TrainConfig, evaluate, select_checkpoint, train_fold,
                       write_epoch_log)

SCHEMA_VERSION = 1
SPLITS = ("source_val", "target_val", "source_test", "target_test")
OUTPUT_DIR_ENV = "KNEEDG_OUTPUT_DIR"


def _check_fields(section: str, data: dict, allowed) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{section}.{unknown[0]}: unknown field")


def _style_from_dict(section: str, data: dict) -> StyleParams:
    _check_fields(section, data, {"exponent_range", "smooth_sigma", "noise_sigma"})
    kwargs = dict(data)
    if "exponent_range" in kwargs:
        kwargs["exponent_range"] = tuple(kwargs["exponent_range"])
    return StyleParams(**kwargs)


def _cohort_from_dict(data: dict) -> CohortSpec:
    allowed = {"n_pairs", "volume_dims", "n_blobs", "blob_sigma_range", "effect_magnitude",
               "lesion_sigma", "source_style", "target_style", "seed"}
    _check_fields("cohort", data, allowed)
    kwargs = dict(data)
    for key in ("volume_dims", "blob_sigma_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    for key in ("source_style", "target_style"):
        if key in kwargs:
            kwargs[key] = _style_from_dict(f"cohort.{key}", kwargs[key])
    return CohortSpec(**kwargs)


def _net_from_dict(data: dict) -> NetConfig:
    allowed = {"input_shape", "stem_channels", "n_residual_blocks", "channel_schedule",
               "norm_kind", "eps", "num_classes"}
    _check_fields("net", data, allowed)
    kwargs = dict(data)
    if "input_shape" in kwargs:
        kwargs["input_shape"] = tuple(kwargs["input_shape"])
    if "channel_schedule" in kwargs:
        kwargs["channel_schedule"] = tuple((c, s) for c, s in kwargs["channel_schedule"])
    if "norm_kind" in kwargs:
        kwargs["norm_kind"] = NormKind(kwargs["norm_kind"])
    return NetConfig(**kwargs)


def _train_from_dict(section: str, data: dict) -> TrainConfig:
    allowed = {"epochs", "batch_size", "lr", "momentum", "loss", "gin", "norm_kind",
               "include_original_view", "selection_threshold", "seed"}
    _check_fields(section, data, allowed)
    kwargs = dict(data)
    if "loss" in kwargs:
        _check_fields(f"{section}.loss", kwargs["loss"],
                      {"contrastive_weight", "temperature"})
        kwargs["loss"] = LossConfig(**kwargs["loss"])
    if "gin" in kwargs:
        if kwargs["gin"] is None:
            pass
        else:
            _check_fields(f"{section}.gin", kwargs["gin"],
                          {"n_layers", "hidden_channels", "kernel", "leaky_slope",
                           "renormalize", "views_per_image"})
            gin_kwargs = dict(kwargs["gin"])
            if "kernel" in gin_kwargs:
                gin_kwargs["kernel"] = tuple(gin_kwargs["kernel"])
            kwargs["gin"] = GinConfig(**gin_kwargs)
    if "norm_kind" in kwargs:
        kwargs["norm_kind"] = NormKind(kwargs["norm_kind"])
    return TrainConfig(**kwargs)


@dataclass
class ExperimentConfig:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    net: NetConfig = field(default_factory=NetConfig)
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(
        loss=LossConfig(contrastive_weight=0.0), gin=None, norm_kind=NormKind.BATCH))
    proposed: TrainConfig = field(default_factory=TrainConfig)
    n_folds: int = 7
    source_val_size: int = 20
    output_dir: str = ""
    seed: int = 0

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_DIR_ENV, "out"))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        allowed = {"schema_version", "cohort", "net", "baseline", "proposed", "n_folds",
                   "source_val_size", "output_dir", "seed"}
        _check_fields("config", data, allowed)
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"schema_version: expected {SCHEMA_VERSION}, got {version}")
        kwargs = {}
        if "cohort" in data:
            kwargs["cohort"] = _cohort_from_dict(data["cohort"])
        if "net" in data:
            kwargs["net"] = _net_from_dict(data["net"])
        if "baseline" in data:
            kwargs["baseline"] = _train_from_dict("baseline", data["baseline"])
        if "proposed" in data:
            kwargs["proposed"] = _train_from_dict("proposed", data["proposed"])
        for key in ("n_folds", "source_val_size", "output_dir", "seed"):
            if key in data:
                kwargs[key] = data[key]
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(data)

    def train_config_for(self, model: str) -> TrainConfig:
        if model == "baseline":
            return self.baseline
        if model == "proposed":
            return self.proposed
        raise ConfigurationError(f"unknown model {model!r}")

    def net_for(self, model: str) -> NetConfig:
        return dataclasses.replace(self.net, norm_kind=self.train_config_for(model).norm_kind)


def folds_payload(folds) -> dict:
    entries = []
    for f in folds:
        entries.append({
            "fold_index": f.fold_index,
            "source_train": sorted(f.source_train),
            "source_val": sorted(f.source_val),
            "target_val": sorted(f.target_val),
            "source_test": sorted(f.source_test),
            "target_test": sorted(f.target_test),
        })
    blob = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode()
    return {"digest": hashlib.sha256(blob).hexdigest(), "folds": entries}


def write_folds(path, folds) -> None:
    with open(path, "w") as fh:
        json.dump(folds_payload(folds), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_folds(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    folds = [FoldSplit(fold_index=e["fold_index"],
                       source_train=frozenset(e["source_train"]),
                       source_val=frozenset(e["source_val"]),
                       target_val=frozenset(e["target_val"]),
                       source_test=frozenset(e["source_test"]),
                       target_test=frozenset(e["target_test"]))
             for e in data["folds"]]
    if folds_payload(folds)["digest"] != data["digest"]:
        raise DataFormatError(f"fold file digest mismatch: {path} was modified")
    return folds


def ensure_folds(config: ExperimentConfig, records, out_dir: Path) -> list:
    """Load the shared fold file, creating it on first use.

    Both models must consume the identical assignment, so an existing file
    wins and its digest is verified.
    """
    path = out_dir / "folds.json"
    if path.exists():
        return read_folds(path)
    folds = make_folds(records, n_folds=config.n_folds,
                       source_val_size=config.source_val_size,
                       rng=RngStream(config.seed, "folds"))
    write_folds(path, folds)
    return folds


def generate_to_disk(config: ExperimentConfig) -> tuple:
    """Write the cohort under <output>/cohort; returns (manifest path, digest)."""
    out_dir = config.resolve_output_dir()
    records = generate_cohort(config.cohort)
    manifest = write_manifest(records, out_dir / "cohort")
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    return manifest, digest


def run_fold_job(config: ExperimentConfig, model: str, fold_index: int) -> dict:
    """Train, select, and evaluate one (model, fold); returns the summary row."""
    out_dir = config.resolve_output_dir()
    manifest = out_dir / "cohort" / "manifest.csv"
    if not manifest.exists():
        raise DataFormatError(f"no cohort at {manifest}; run generate first")
    records = load_manifest(manifest)
    folds = ensure_folds(config, records, out_dir)
    by_index = {f.fold_index: f for f in folds}
    if fold_index not in by_index:
        raise ConfigurationError(f"fold {fold_index} does not exist (have 0..{len(folds) - 1})")
    fold = by_index[fold_index]

    train_cfg = config.train_config_for(model)
    net_cfg = config.net_for(model)
    job_dir = out_dir / model / f"fold-{fold_index}"
    job_dir.mkdir(parents=True, exist_ok=True)

    logs = train_fold(fold, records, net_cfg, train_cfg, job_dir)
    write_epoch_log(job_dir / "epoch_log.csv", logs)
    selection = select_checkpoint(logs, train_cfg.selection_threshold)
    selected_log = logs[selection.epoch_index]
    with open(job_dir / "selected.json", "w") as fh:
        json.dump({"epoch_index": selection.epoch_index, "fallback": selection.fallback,
                   "checkpoint_path": selected_log.checkpoint_path}, fh, indent=1)
        fh.write("\n")

    model_obj = model_from_checkpoint(net_cfg, selected_log.checkpoint_path)
    row = {"fold": fold_index}
    reports = []
    for split in SPLITS:
        domain = Domain.SOURCE if split.startswith("source") else Domain.TARGET
        subjects = getattr(fold, split)
        _, rep = evaluate(model_obj, records, subjects, domain)
        row[split] = rep.accuracy
        reports.append((fold_index, split, rep))
        write_confusion_csv(job_dir / f"confusion_{split}.csv", rep.confusion)
        with open(job_dir / f"confusion_{split}.txt", "w") as fh:
            fh.write(confusion_grid(rep.confusion))
    write_reports_csv(job_dir / "metrics.csv", reports)
    return row


def _job_entry(payload):
    config = ExperimentConfig.from_dict(payload["config"])
    return payload["model"], run_fold_job(config, payload["model"], payload["fold"])


def _config_to_dict(config: ExperimentConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, NormKind):
            return obj.value
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    data = {"schema_version": SCHEMA_VERSION}
    for key in ("cohort", "net", "baseline", "proposed"):
        data[key] = plain(getattr(config, key))
    # asdict leaves enums inside nested dataclasses untouched; normalize.
    data["net"]["norm_kind"] = config.net.norm_kind.value
    data["baseline"]["norm_kind"] = config.baseline.norm_kind.value
    data["proposed"]["norm_kind"] = config.proposed.norm_kind.value
    for key in ("n_folds", "source_val_size", "output_dir", "seed"):
        data[key] = getattr(config, key)
    return data


def write_summary(path, rows) -> None:
    """Per-fold accuracy rows plus a mean +/- std row per split."""
    rows = sorted(rows, key=lambda r: r["fold"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold"] + list(SPLITS))
        for row in rows:
            writer.writerow([row["fold"]] + [f"{row[s]:.6f}" for s in SPLITS])
        if len(rows) >= 2:
            cells = []
            for split in SPLITS:
                m, s = mean_std([row[split] for row in rows])
                cells.append(f"{m:.4f} +/- {s:.4f}")
            writer.writerow(["mean_std"] + cells)


def write_comparison(path, baseline_rows, proposed_rows) -> None:
    """Paired per-split means and one-sided t-test p-values."""
    baseline_rows = sorted(baseline_rows, key=lambda r: r["fold"])
    proposed_rows = sorted(proposed_rows, key=lambda r: r["fold"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "baseline_mean", "baseline_std", "proposed_mean",
                         "proposed_std", "t", "p_value"])
        for split in SPLITS:
            base = [r[split] for r in baseline_rows]
            prop = [r[split] for r in proposed_rows]
            bm, bs = mean_std(base)
            pm, ps = mean_std(prop)
            t, p = paired_t_one_sided(base, prop)
            writer.writerow([split, f"{bm:.6f}", f"{bs:.6f}", f"{pm:.6f}", f"{ps:.6f}",
                             f"{t:.6f}", f"{p:.6e}"])


def run_experiment(config: ExperimentConfig, models, fold_indices=None, jobs: int = 1):
    """Run the requested (model, fold) grid; returns per-model rows and the
    list of (model, fold, error) failures. Divergent folds do not stop the
    others.
    """
    out_dir = config.resolve_output_dir()
    manifest = out_dir / "cohort" / "manifest.csv"
    if not manifest.exists():
        raise DataFormatError(f"no cohort at {manifest}; run generate first")
    # materialize the fold file before dispatch so parallel workers never
    # race each other creating it
    ensure_folds(config, load_manifest(manifest), out_dir)
    if fold_indices is None:
        fold_indices = list(range(config.n_folds))
    payloads = [{"config": _config_to_dict(config), "model": m, "fold": f}
                for m in models for f in fold_indices]
    results = {m: [] for m in models}
    failures = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(p, pool.submit(_job_entry, p)) for p in payloads]
            for payload, future in futures:
                try:
                    model, row = future.result()
                    results[model].append(row)
                except Exception as exc:
                    failures.append((payload["model"], payload["fold"], exc))
    else:
        for payload in payloads:
            try:
                model, row = _job_entry(payload)
                results[model].append(row)
            except Exception as exc:
                failures.append((payload["model"], payload["fold"], exc))
    for model in models:
        if results[model]:
            write_summary(out_dir / model / "summary.csv", results[model])
    if len(models) == 2 and all(len(results[m]) == len(fold_indices) for m in models):
        write_comparison(out_dir / "comparison.csv", results["baseline"],
                         results["proposed"])
    return results, failures


def column_stats(csv_path):
    """mean/std per column and p-values for baseline_X / proposed_X pairs.

    Returns (column stats dict in file order, list of (name, t, p)).
    """
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataFormatError(f"{csv_path} has no header row")
        columns = {name: [] for name in reader.fieldnames if name != "fold"}
        for row in reader:
            for name in columns:
                cell = row[name]
                if cell is None or cell == "":
                    raise DataFormatError(f"ragged input: column {name} has a missing value")
                columns[name].append(float(cell))
    lengths = {len(v) for v in columns.values()}
    if len(lengths) > 1:
        raise DataFormatError(f"ragged input: column lengths {sorted(lengths)}")
    stats = {name: mean_std(values) for name, values in columns.items()}
    pairs = []
    for name, values in columns.items():
        if not name.startswith("baseline_"):
            continue
        partner = "proposed_" + name[len("baseline_"):]
        if partner in columns:
            t, p = paired_t_one_sided(values, columns[partner])
            pairs.append((name[len("baseline_"):], t, p))
    return stats, pairs
