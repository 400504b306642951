"""Synthetic paired two-domain cohort, slice preprocessing, folds, volume I/O.

Every subject is a smooth random blob field (the anatomy). Case subjects
additionally carry one localized lesion blob. The same anatomy is rendered
twice through two different intensity styles (monotone nonlinear curve,
smoothing, noise) to produce a source-domain and a target-domain volume,
so the label-relevant structure is shared across domains while the
appearance is not.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, ContractError, DataFormatError
from .rng import RngStream

VOLUME_MAGIC = b"DGV1"


class VolumeHeaderError(DataFormatError):
    """Missing or malformed volume file header."""


class VolumeDimensionError(DataFormatError):
    """Declared dimensions are implausible."""


class VolumeTruncatedError(DataFormatError):
    """Payload shorter or longer than the header promises."""


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class VolumeRecord:
    subject_id: int
    pair_id: int
    domain: Domain
    label: int
    volume: np.ndarray


@dataclass
class StyleParams:
    """One domain's appearance: intensity curve exponent drawn per volume
    from exponent_range, then Gaussian smoothing, then additive noise."""

    exponent_range: tuple = (0.9, 1.1)
    smooth_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        lo, hi = self.exponent_range
        if lo <= 0 or hi < lo:
            raise ConfigurationError(f"exponent_range must be 0 < lo <= hi, got {self.exponent_range}")
        if self.smooth_sigma < 0 or self.noise_sigma < 0:
            raise ConfigurationError("smoothing and noise sigmas must be nonnegative")

    @classmethod
    def identity(cls) -> "StyleParams":
        return cls(exponent_range=(1.0, 1.0), smooth_sigma=0.0, noise_sigma=0.0)


@dataclass
class CohortSpec:
    n_pairs: int = 70
    volume_dims: tuple = (16, 24, 24)
    n_blobs: int = 6
    blob_sigma_range: tuple = (1.5, 4.0)
    effect_magnitude: float = 0.6
    lesion_sigma: float = 2.0
    source_style: StyleParams = field(default_factory=StyleParams)
    target_style: StyleParams = field(
        default_factory=lambda: StyleParams(exponent_range=(0.25, 0.45),
                                            smooth_sigma=0.8, noise_sigma=0.03))
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 7:
            raise ConfigurationError(f"need at least 7 pairs (one per fold), got {self.n_pairs}")
        if len(self.volume_dims) != 3 or any(d < 1 for d in self.volume_dims):
            raise ConfigurationError(f"volume_dims must be three positive ints, got {self.volume_dims}")
        if any(d < m for d, m in zip(self.volume_dims, (4, 8, 8))):
            raise ConfigurationError(f"volume_dims must be at least (4, 8, 8), got {self.volume_dims}")
        if self.effect_magnitude < 0:
            raise ConfigurationError(f"effect_magnitude must be nonnegative, got {self.effect_magnitude}")
        if self.n_blobs < 1:
            raise ConfigurationError(f"need at least one anatomy blob, got {self.n_blobs}")


def _blob(dims, center, sigma, amplitude):
    zz, yy, xx = np.ogrid[:dims[0], :dims[1], :dims[2]]
    dist2 = ((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
    return amplitude * np.exp(-dist2 / (2.0 * sigma ** 2))


def _anatomy(stream: RngStream, spec: CohortSpec) -> np.ndarray:
    dims = spec.volume_dims
    out = np.zeros(dims)
    lo, hi = spec.blob_sigma_range
    for _ in range(spec.n_blobs):
        center = [float(stream.uniform(0, d - 1)) for d in dims]
        sigma = float(stream.uniform(lo, hi))
        amplitude = float(stream.uniform(0.3, 1.0))
        out += _blob(dims, center, sigma, amplitude)
    return out


def _lesion(stream: RngStream, spec: CohortSpec) -> np.ndarray:
    # Lesions sit away from the borders so the styles' smoothing cannot
    # push them out of the volume.
    dims = spec.volume_dims
    center = [float(stream.uniform(d / 4.0, 3.0 * d / 4.0)) for d in dims]
    return _blob(dims, center, spec.lesion_sigma, spec.effect_magnitude)


def _apply_style(anatomy: np.ndarray, style: StyleParams, stream: RngStream) -> np.ndarray:
    # Squash to [0, 1) so the exponent curve is a well-defined monotone
    # intensity remap regardless of how many blobs stacked up.
    u = anatomy / (1.0 + anatomy)
    exponent = float(stream.uniform(*style.exponent_range))
    v = u ** exponent
    if style.smooth_sigma > 0:
        v = gaussian_filter(v, style.smooth_sigma)
    if style.noise_sigma > 0:
        v = v + stream.normal(v.shape) * style.noise_sigma
    return v


def generate_cohort(spec: CohortSpec) -> list:
    """All 2 domains x 2*n_pairs subjects, deterministically from spec.seed.

    Subject 2p is pair p's control, subject 2p+1 its case.
    """
    stream = RngStream(spec.seed, "cohort")
    records = []
    for pair in range(spec.n_pairs):
        for member, label in ((0, 0), (1, 1)):
            sid = 2 * pair + member
            sub = stream.child(f"subject-{sid}")
            anatomy = _anatomy(sub, spec)
            if label == 1:
                anatomy = anatomy + _lesion(sub, spec)
            for domain, style in ((Domain.SOURCE, spec.source_style),
                                  (Domain.TARGET, spec.target_style)):
                vol = _apply_style(anatomy, style, sub.child(f"style-{domain.value}"))
                records.append(VolumeRecord(subject_id=sid, pair_id=pair, domain=domain,
                                            label=label, volume=vol.astype(np.float32)))
    return records


def central_slices(volume: np.ndarray, k: int = 36) -> np.ndarray:
    """Keep the middle k slices; zero-pad symmetrically when short.

    An odd pad splits floor-before / remainder-after.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    n = volume.shape[0]
    if n >= k:
        start = (n - k) // 2
        return volume[start:start + k]
    before = (k - n) // 2
    after = k - n - before
    pad = [(before, after)] + [(0, 0)] * (volume.ndim - 1)
    return np.pad(volume, pad)


def downsample_slices(volume: np.ndarray, target: int = 36) -> np.ndarray:
    """Decimate to target slices by uniform index selection, keeping both
    endpoints: indices round(i*(N-1)/(target-1))."""
    n = volume.shape[0]
    if target < 2:
        raise ContractError(f"target must be >= 2, got {target}")
    if n < target:
        raise ContractError(f"cannot downsample {n} slices to {target}; "
                            "pad with central_slices instead")
    idx = np.rint(np.arange(target) * (n - 1) / (target - 1)).astype(int)
    return volume[idx]


@dataclass
class FoldSplit:
    fold_index: int
    source_train: frozenset
    source_val: frozenset
    target_val: frozenset
    source_test: frozenset
    target_test: frozenset

    def roles(self):
        return {"source_train": self.source_train, "source_val": self.source_val,
                "target_val": self.target_val, "source_test": self.source_test,
                "target_test": self.target_test}


def make_folds(records, n_folds: int = 7, source_val_size: int = 100,
               rng: RngStream | None = None) -> list:
    """Rotation folds over matched pairs.

    Pairs are shuffled once and split into n_folds groups. Fold f uses
    group f as the test set (the same subjects in both domains), the next
    group in cyclic order as target validation, and the remaining groups
    as the training pool; source validation takes min(source_val_size,
    available) subjects, whole pairs only, from the pool's first group,
    whose leftovers stay in source training.
    """
    if rng is None:
        rng = RngStream(0, "folds")
    pair_ids = sorted({r.pair_id for r in records})
    pair_subjects = {}
    for r in records:
        pair_subjects.setdefault(r.pair_id, set()).add(r.subject_id)
    if n_folds < 3:
        raise ConfigurationError(
            f"need n_folds >= 3 so test, target-val, and training groups all exist, got {n_folds}")
    if len(pair_ids) < n_folds:
        raise ConfigurationError(
            f"need at least one pair per fold: {len(pair_ids)} pairs < {n_folds} folds")
    if source_val_size < 2 or source_val_size % 2:
        raise ConfigurationError(
            f"source_val_size must be a positive even subject count "
            f"(whole pairs only), got {source_val_size}")

    order = [pair_ids[i] for i in rng.permutation(len(pair_ids))]
    groups = [list(chunk) for chunk in np.array_split(order, n_folds)]

    def subjects_of(pairs):
        out = set()
        for p in pairs:
            out |= pair_subjects[p]
        return frozenset(out)

    folds = []
    for f in range(n_folds):
        rest = [(f + i) % n_folds for i in range(1, n_folds)]
        test_pairs = groups[f]
        target_val_pairs = groups[rest[0]]
        pool_groups = [groups[g] for g in rest[1:]]
        sv_pairs_wanted = source_val_size // 2
        first = pool_groups[0]
        sv_pairs = first[:min(sv_pairs_wanted, len(first))]
        train_pairs = first[len(sv_pairs):]
        for g in pool_groups[1:]:
            train_pairs = train_pairs + g
        if not train_pairs:
            raise ConfigurationError(
                "source training would be empty: source validation consumed the "
                "entire training pool; lower source_val_size or add pairs/folds")
        test_subjects = subjects_of(test_pairs)
        folds.append(FoldSplit(
            fold_index=f,
            source_train=subjects_of(train_pairs),
            source_val=subjects_of(sv_pairs),
            target_val=subjects_of(target_val_pairs),
            source_test=test_subjects,
            target_test=test_subjects,
        ))
    return folds


def save_volume(volume: np.ndarray, path) -> None:
    """DGV1 file: magic, three uint32 LE dims, row-major float32 LE voxels."""
    if volume.ndim != 3:
        raise ContractError(f"expected a 3D volume, got shape {volume.shape}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<III", *volume.shape))
        fh.write(np.ascontiguousarray(volume, dtype="<f4").tobytes())


_MAX_VOXELS = 2 ** 31


def load_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise VolumeHeaderError(f"file too short for a volume header ({len(blob)} bytes)")
    if blob[:4] != VOLUME_MAGIC:
        raise VolumeHeaderError(f"bad volume magic {blob[:4]!r}")
    dims = struct.unpack("<III", blob[4:16])
    voxels = int(dims[0]) * int(dims[1]) * int(dims[2])
    if min(dims) < 1 or voxels > _MAX_VOXELS:
        raise VolumeDimensionError(f"implausible dimensions {dims}")
    want = 16 + 4 * voxels
    if len(blob) != want:
        raise VolumeTruncatedError(f"expected {want} bytes for dims {dims}, file has {len(blob)}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(dims).copy()


def write_manifest(records, out_dir) -> Path:
    """Save every record's volume plus an index CSV; returns the CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "pair_id", "domain", "label", "path"])
        for r in records:
            name = f"s{r.subject_id:05d}_{r.domain.value}.dgv"
            save_volume(r.volume, out_dir / name)
            writer.writerow([r.subject_id, r.pair_id, r.domain.value, r.label, name])
    return manifest


def load_manifest(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "pair_id", "domain", "label", "path"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataFormatError(f"manifest must have columns {sorted(required)}")
        for row in reader:
            records.append(VolumeRecord(
                subject_id=int(row["subject_id"]),
                pair_id=int(row["pair_id"]),
                domain=Domain(row["domain"]),
                label=int(row["label"]),
                volume=load_volume(base / row["path"]),
            ))
    return records
