"""Per-fold training loop, entropy-based checkpoint selection, evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import Domain, FoldSplit
from .errors import ConfigurationError, ContractError, KneedgError
from .gin import GinConfig, augment_views
from .losses import LossConfig, ViewBatch, prediction_entropy, total_loss
from .metrics import MetricsReport, report
from .network import Model, NetConfig, NormKind, build_model, save_checkpoint
from .rng import RngStream
from .tensor import SGD, Tape, Tensor, backward, softmax

EVAL_BATCH = 16


class TrainingDivergedError(KneedgError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    gin: GinConfig | None = field(default_factory=GinConfig)
    norm_kind: NormKind = NormKind.INSTANCE
    include_original_view: bool = True
    selection_threshold: float = 0.65
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.selection_threshold < 1.0:
            raise ConfigurationError(
                f"selection threshold must lie in (0, 1), got {self.selection_threshold}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    source_val_accuracy: float
    target_val_entropy: float
    checkpoint_path: str


@dataclass
class Counters:
    """Instrumentation for asserting which code paths a run touched."""

    gin_expansions: int = 0
    contrastive_batches: int = 0


@dataclass
class SelectionResult:
    epoch_index: int
    fallback: bool


def expand_batch(records, train_cfg: TrainConfig, gin_stream: RngStream, epoch: int,
                 counters: Counters | None = None):
    """Build the classifier batch for a list of original-image records.

    With GIN enabled each image contributes its augmented views (plus the
    original when configured), all rows sharing the image's label and id;
    otherwise each image is a single row.
    """
    xs, labels, image_ids = [], [], []
    for rec in records:
        vol = rec.volume.astype(np.float64)
        rows = []
        if train_cfg.gin is not None:
            if counters is not None:
                counters.gin_expansions += 1
            stream = gin_stream.child(f"epoch-{epoch}/image-{rec.subject_id}")
            if train_cfg.include_original_view:
                rows.append(vol)
            rows.extend(augment_views(vol, stream, train_cfg.gin))
        else:
            rows.append(vol)
        for row in rows:
            xs.append(row)
            labels.append(rec.label)
            image_ids.append(rec.subject_id)
    x = np.stack(xs)[:, None]
    return x, np.asarray(labels), np.asarray(image_ids)


def _forward_scores(model: Model, volumes: np.ndarray) -> np.ndarray:
    """Class-1 probabilities in inference mode, batched to bound memory."""
    scores = []
    for start in range(0, len(volumes), EVAL_BATCH):
        chunk = Tensor(volumes[start:start + EVAL_BATCH])
        logits, _ = model.forward(chunk, training=False)
        scores.append(softmax(logits).data[:, 1])
    return np.concatenate(scores)


def _records_for(records, subject_ids, domain: Domain):
    wanted = set(subject_ids)
    picked = [r for r in records if r.subject_id in wanted and r.domain is domain]
    missing = wanted - {r.subject_id for r in picked}
    if missing:
        raise ContractError(f"no {domain.value} volumes for subjects {sorted(missing)[:5]}")
    return sorted(picked, key=lambda r: r.subject_id)


def train_fold(fold: FoldSplit, records, net_cfg: NetConfig, train_cfg: TrainConfig,
               checkpoint_dir, counters: Counters | None = None) -> list:
    """Train one fold; one checkpoint and one EpochLog per epoch.

    Everything random derives from (train_cfg.seed, fold index), so a rerun
    reproduces the logs bit for bit.
    """
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    tag = f"fold-{fold.fold_index}"
    model = build_model(net_cfg, RngStream(train_cfg.seed, f"init/{tag}"))
    optimizer = SGD(model.parameters(), lr=train_cfg.lr, momentum=train_cfg.momentum)
    shuffle_stream = RngStream(train_cfg.seed, f"shuffle/{tag}")
    gin_stream = RngStream(train_cfg.seed, f"gin/{tag}")

    train_records = _records_for(records, fold.source_train, Domain.SOURCE)
    val_records = _records_for(records, fold.source_val, Domain.SOURCE)
    tval_records = _records_for(records, fold.target_val, Domain.TARGET)
    val_volumes = np.stack([r.volume.astype(np.float64) for r in val_records])[:, None]
    val_labels = np.array([r.label for r in val_records])
    tval_volumes = np.stack([r.volume.astype(np.float64) for r in tval_records])[:, None]

    contrastive = train_cfg.loss.contrastive_weight > 0.0
    logs = []
    for epoch in range(train_cfg.epochs):
        order = shuffle_stream.permutation(len(train_records))
        batch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = [train_records[i] for i in order[start:start + train_cfg.batch_size]]
            x, labels, image_ids = expand_batch(chunk, train_cfg, gin_stream, epoch, counters)
            with Tape() as tape:
                logits, embedding = model.forward(Tensor(x), training=True)
                batch = None
                if contrastive:
                    if counters is not None:
                        counters.contrastive_batches += 1
                    batch = ViewBatch(embedding, labels, image_ids)
                loss = total_loss(logits, labels, batch, train_cfg.loss)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(epoch)
            backward(tape, loss)
            optimizer.step()
            optimizer.zero_grad()
            batch_losses.append(loss.item())

        val_scores = _forward_scores(model, val_volumes)
        val_preds = (val_scores > 0.5).astype(int)
        accuracy = float((val_preds == val_labels).mean())
        tval_probs = []
        for start in range(0, len(tval_volumes), EVAL_BATCH):
            logits, _ = model.forward(Tensor(tval_volumes[start:start + EVAL_BATCH]),
                                      training=False)
            tval_probs.append(softmax(logits).data)
        entropy = prediction_entropy(np.concatenate(tval_probs))

        ckpt = checkpoint_dir / f"epoch-{epoch:03d}.ckpt"
        save_checkpoint(model, ckpt)
        logs.append(EpochLog(epoch=epoch, train_loss=float(np.mean(batch_losses)),
                             source_val_accuracy=accuracy, target_val_entropy=entropy,
                             checkpoint_path=str(ckpt)))
    return logs


def select_checkpoint(logs, threshold: float) -> SelectionResult:
    """Lowest target-validation entropy among epochs whose source accuracy
    clears the threshold; ties go to the earliest epoch. With no qualifying
    epoch, fall back to the highest accuracy and say so.
    """
    if not logs:
        raise ContractError("cannot select from an empty log list")
    qualifying = [l for l in logs if l.source_val_accuracy >= threshold]
    if qualifying:
        best = min(qualifying, key=lambda l: (l.target_val_entropy, l.epoch))
        return SelectionResult(epoch_index=best.epoch, fallback=False)
    best = max(logs, key=lambda l: (l.source_val_accuracy, -l.epoch))
    return SelectionResult(epoch_index=best.epoch, fallback=True)


def evaluate(model: Model, records, subject_ids, domain: Domain):
    """(per-subject class-1 scores, MetricsReport) on one domain's volumes."""
    picked = _records_for(records, subject_ids, domain)
    volumes = np.stack([r.volume.astype(np.float64) for r in picked])[:, None]
    labels = np.array([r.label for r in picked])
    scores = _forward_scores(model, volumes)
    rep = report(scores, labels)
    return {r.subject_id: float(s) for r, s in zip(picked, scores)}, rep


def write_epoch_log(path, logs) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "source_val_accuracy",
                         "target_val_entropy", "checkpoint_path"])
        for log in logs:
            writer.writerow([log.epoch, f"{log.train_loss:.8f}",
                             f"{log.source_val_accuracy:.8f}",
                             f"{log.target_val_entropy:.8f}", log.checkpoint_path])


def read_epoch_log(path) -> list:
    logs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            logs.append(EpochLog(epoch=int(row["epoch"]),
                                 train_loss=float(row["train_loss"]),
                                 source_val_accuracy=float(row["source_val_accuracy"]),
                                 target_val_entropy=float(row["target_val_entropy"]),
                                 checkpoint_path=row["checkpoint_path"]))
    return logs
