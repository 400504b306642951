"""Classification, contrastive, and entropy objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, log_softmax


@dataclass
class LossConfig:
    """Weights for the combined training objective.

    contrastive_weight scales the supervised contrastive term added to the
    classification loss; temperature sharpens the similarity distribution.
    """

    contrastive_weight: float = 0.5
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.contrastive_weight < 0:
            raise ContractError(
                f"contrastive weight must be nonnegative, got {self.contrastive_weight}")


class ViewBatch:
    """Embeddings plus the label/identity bookkeeping the contrastive loss needs.

    Rows that are views of the same underlying image share an image_id and
    must carry the same class label.
    """

    def __init__(self, embeddings: Tensor, class_labels, image_ids):
        self.embeddings = embeddings
        self.class_labels = np.asarray(class_labels, dtype=np.int64)
        self.image_ids = np.asarray(image_ids, dtype=np.int64)
        m = embeddings.shape[0]
        if self.class_labels.shape != (m,) or self.image_ids.shape != (m,):
            raise DimensionError("labels and image ids must have one entry per embedding row")
        for img in np.unique(self.image_ids):
            labels = self.class_labels[self.image_ids == img]
            if not (labels == labels[0]).all():
                raise ContractError(f"image id {img} appears with conflicting class labels")

    def __len__(self):
        return self.embeddings.shape[0]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = (log_softmax(logits) * Tensor(onehot)).sum(axis=1)
    return -picked.mean()


def supcon_loss(batch: ViewBatch, tau: float) -> Tensor:
    """Supervised contrastive loss over L2-normalized embeddings.

    For each anchor, positives are all other rows with the same class label
    (which includes the other views of its image). Anchors with no positive
    are excluded from the mean; a batch where every anchor is positive-free
    is rejected.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    m = len(batch)
    if m < 2:
        raise ContractError(f"contrastive loss needs at least 2 rows, got {m}")
    labels = batch.class_labels
    off_diag = 1.0 - np.eye(m)
    pos_mask = (labels[:, None] == labels[None, :]).astype(np.float64) * off_diag
    pos_counts = pos_mask.sum(axis=1)
    included = pos_counts >= 1.0
    if not included.any():
        raise ContractError("degenerate batch: no anchor has a positive")

    z = batch.embeddings
    sim = (z @ z.transpose2d()) * (1.0 / tau)
    # Row max over the competitors only; a detached constant shift, so it
    # stabilizes exp() without touching the gradient. The diagonal is pushed
    # to -inf before exp: self-similarity never competes, and at small tau it
    # would overflow anything the off-diagonal shift leaves behind.
    shift = np.where(off_diag > 0, sim.data, -np.inf).max(axis=1, keepdims=True)
    logits = sim - Tensor(shift)
    drop_self = np.where(off_diag > 0, 0.0, -np.inf)
    denom = (logits + Tensor(drop_self)).exp().sum(axis=1, keepdims=True)
    log_prob = logits - denom.log()
    safe_counts = np.where(included, pos_counts, 1.0)
    per_anchor = -(log_prob * Tensor(pos_mask)).sum(axis=1) / Tensor(safe_counts)
    picked = per_anchor * Tensor(included.astype(np.float64))
    return picked.sum() * (1.0 / float(included.sum()))


def total_loss(logits: Tensor, labels, batch: ViewBatch | None, config: LossConfig) -> Tensor:
    """cross_entropy + contrastive_weight * supcon_loss.

    With a zero contrastive weight the contrastive term is never evaluated,
    so the baseline configuration exercises only the classification path.
    """
    ce = cross_entropy(logits, labels)
    if config.contrastive_weight == 0.0:
        return ce
    if batch is None:
        raise ContractError("a ViewBatch is required when the contrastive weight is nonzero")
    return ce + config.contrastive_weight * supcon_loss(batch, config.temperature)


def prediction_entropy(probs) -> float:
    """Mean Shannon entropy (nats) of prediction rows, with 0*ln(0) = 0."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError(f"expected [N,K] probabilities, got shape {p.shape}")
    if (p < 0).any():
        raise ContractError("probabilities must be nonnegative")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ContractError("rows must sum to 1 within 1e-6")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=1).mean())
