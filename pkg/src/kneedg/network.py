"""3D residual classification network with switchable normalization.

The architecture is a small ResNet-style volume classifier: a three-conv
stem with one max-pooling, a run of residual blocks whose channel widths
and strides come from the config, then norm + ReLU + global average
pooling feeding a linear classification head. Every normalization layer
is either batch norm (with running statistics for inference) or instance
norm, chosen once for the whole model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DataFormatError, DimensionError
from .rng import RngStream
from .tensor import (RunningStats, Tensor, batch_norm, conv3d, global_avg_pool,
                     instance_norm, linear, maxpool3d, relu)

CHECKPOINT_MAGIC = b"KDG1"
CHECKPOINT_VERSION = 1


class NormKind(Enum):
    BATCH = "batch"
    INSTANCE = "instance"


@dataclass
class NetConfig:
    """Architecture hyperparameters.

    channel_schedule is a tuple of (out_channels, stride) pairs, one per
    residual block; stride 2 halves each spatial dim via the block's first
    conv (and its projection skip).
    """

    input_shape: tuple = (1, 16, 32, 32)
    stem_channels: int = 8
    n_residual_blocks: int = 8
    channel_schedule: tuple = ((8, 1), (8, 1), (16, 2), (16, 1),
                               (32, 2), (32, 1), (64, 2), (64, 1))
    norm_kind: NormKind = NormKind.BATCH
    eps: float = 1e-5
    num_classes: int = 2

    def __post_init__(self):
        if len(self.input_shape) != 4 or self.input_shape[0] < 1:
            raise ConfigurationError(
                f"input_shape must be (channels, depth, height, width), got {self.input_shape}")
        if self.stem_channels < 1:
            raise ConfigurationError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.n_residual_blocks < 1:
            raise ConfigurationError(
                f"need at least one residual block, got {self.n_residual_blocks}")
        if len(self.channel_schedule) != self.n_residual_blocks:
            raise ConfigurationError(
                f"channel_schedule has {len(self.channel_schedule)} entries "
                f"for {self.n_residual_blocks} blocks")
        for entry in self.channel_schedule:
            if len(entry) != 2 or entry[0] < 1 or entry[1] < 1:
                raise ConfigurationError(f"bad schedule entry {entry}: "
                                         "need (out_channels >= 1, stride >= 1)")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")

    @classmethod
    def default_desk(cls, norm_kind: NormKind = NormKind.BATCH) -> "NetConfig":
        """The reference configuration: 1x16x32x32 input, 8 stem channels,
        8 blocks widening 8->64 with stride-2 downsampling at blocks 3, 5, 7."""
        return cls(input_shape=(1, 16, 32, 32), stem_channels=8, n_residual_blocks=8,
                   channel_schedule=((8, 1), (8, 1), (16, 2), (16, 1),
                                     (32, 2), (32, 1), (64, 2), (64, 1)),
                   norm_kind=norm_kind)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "stem_channels": int(self.stem_channels),
            "n_residual_blocks": int(self.n_residual_blocks),
            "channel_schedule": [[int(c), int(s)] for c, s in self.channel_schedule],
            "norm_kind": self.norm_kind.value,
            "eps": float(self.eps),
            "num_classes": int(self.num_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(input_shape=tuple(d["input_shape"]),
                   stem_channels=d["stem_channels"],
                   n_residual_blocks=d["n_residual_blocks"],
                   channel_schedule=tuple((c, s) for c, s in d["channel_schedule"]),
                   norm_kind=NormKind(d["norm_kind"]),
                   eps=d["eps"],
                   num_classes=d["num_classes"])

    def digest(self) -> bytes:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).digest()[:16]


class Conv3dLayer:
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng: RngStream):
        kd, kh, kw = kernel
        fan_in = in_ch * kd * kh * kw
        w = rng.normal((out_ch, in_ch, kd, kh, kw)) / np.sqrt(fan_in)
        self.weight = Tensor(w, grad_enabled=True)
        self.bias = Tensor(np.zeros(out_ch), grad_enabled=True)
        self.stride = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
        self.padding = (padding,) * 3 if np.isscalar(padding) else tuple(padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class NormLayer:
    """Batch or instance normalization with learnable affine terms."""

    def __init__(self, channels, kind: NormKind, eps: float):
        self.kind = kind
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), grad_enabled=True)
        self.beta = Tensor(np.zeros(channels), grad_enabled=True)
        self.running = RunningStats(channels) if kind is NormKind.BATCH else None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.kind is NormKind.BATCH:
            return batch_norm(x, self.gamma, self.beta, self.eps, training, self.running)
        return instance_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        if self.running is None:
            return []
        return [self.running.mean, self.running.var]


class LinearLayer:
    def __init__(self, in_features, out_features, rng: RngStream):
        w = rng.normal((out_features, in_features)) / np.sqrt(in_features)
        self.weight = Tensor(w, grad_enabled=True)
        self.bias = Tensor(np.zeros(out_features), grad_enabled=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ResidualBlock:
    """Two conv+norm+ReLU stages plus a skip connection.

    The skip is the identity when neither channels nor resolution change;
    otherwise a strided 1x1x1 projection conv brings x to the branch shape.
    """

    def __init__(self, in_ch, out_ch, stride, norm_kind, eps, rng: RngStream):
        self.conv_a = Conv3dLayer(in_ch, out_ch, (3, 3, 3), stride, 1, rng)
        self.norm_a = NormLayer(out_ch, norm_kind, eps)
        self.conv_b = Conv3dLayer(out_ch, out_ch, (3, 3, 3), 1, 1, rng)
        self.norm_b = NormLayer(out_ch, norm_kind, eps)
        if in_ch != out_ch or stride != 1:
            self.projection = Conv3dLayer(in_ch, out_ch, (1, 1, 1), stride, 0, rng)
        else:
            self.projection = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.norm_a(self.conv_a(x), training))
        h = relu(self.norm_b(self.conv_b(h), training))
        skip = x if self.projection is None else self.projection(x)
        return h + skip

    def parameters(self):
        out = self.conv_a.parameters() + self.norm_a.parameters()
        out += self.conv_b.parameters() + self.norm_b.parameters()
        if self.projection is not None:
            out += self.projection.parameters()
        return out

    def buffers(self):
        return self.norm_a.buffers() + self.norm_b.buffers()


class Model:
    """Stem -> residual blocks -> norm/ReLU/GAP -> linear head.

    forward returns classification logits and the L2-normalized global
    average pooled features, the latter serving as the contrastive
    embedding.
    """

    def __init__(self, config: NetConfig, rng: RngStream):
        c, d, h, w = config.input_shape
        # The stem's first conv is unpadded (3x3x3) and is followed by a
        # 2x2x2 pool, so each spatial dim must survive both.
        if min(d, h, w) < 4:
            raise ConfigurationError(
                f"input spatial dims {(d, h, w)} too small for the stem "
                "(need >= 4 per axis)")
        self.config = config
        kind, eps = config.norm_kind, config.eps
        sc = config.stem_channels
        self.stem_conv1 = Conv3dLayer(c, sc, (3, 3, 3), 1, 0, rng)
        self.stem_norm1 = NormLayer(sc, kind, eps)
        self.stem_conv2 = Conv3dLayer(sc, sc, (3, 3, 3), 1, 1, rng)
        self.stem_norm2 = NormLayer(sc, kind, eps)
        self.stem_conv3 = Conv3dLayer(sc, sc, (3, 3, 3), 1, 1, rng)
        self.blocks = []
        in_ch = sc
        for out_ch, stride in config.channel_schedule:
            self.blocks.append(ResidualBlock(in_ch, out_ch, stride, kind, eps, rng))
            in_ch = out_ch
        self.head_norm = NormLayer(in_ch, kind, eps)
        self.fc = LinearLayer(in_ch, config.num_classes, rng)
        self.embedding_dim = in_ch

    def forward(self, x: Tensor, training: bool = False):
        if x.data.ndim != 5 or x.shape[1:] != tuple(self.config.input_shape):
            raise DimensionError(f"expected batch shape (N, {self.config.input_shape}), "
                                 f"got {x.shape}")
        h = relu(self.stem_norm1(self.stem_conv1(x), training))
        h = maxpool3d(h, (2, 2, 2))
        h = relu(self.stem_norm2(self.stem_conv2(h), training))
        h = self.stem_conv3(h)
        for block in self.blocks:
            h = block(h, training)
        h = relu(self.head_norm(h, training))
        pooled = global_avg_pool(h)
        logits = self.fc(pooled)
        sq = (pooled * pooled).sum(axis=1, keepdims=True)
        embedding = pooled / (sq + 1e-12) ** 0.5
        return logits, embedding

    def parameters(self):
        out = self.stem_conv1.parameters() + self.stem_norm1.parameters()
        out += self.stem_conv2.parameters() + self.stem_norm2.parameters()
        out += self.stem_conv3.parameters()
        for block in self.blocks:
            out += block.parameters()
        out += self.head_norm.parameters() + self.fc.parameters()
        return out

    def buffers(self):
        out = self.stem_norm1.buffers() + self.stem_norm2.buffers()
        for block in self.blocks:
            out += block.buffers()
        out += self.head_norm.buffers()
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def build_model(config: NetConfig, rng: RngStream) -> Model:
    return Model(config, rng)


def save_checkpoint(model: Model, path) -> None:
    """Binary checkpoint: magic, version, config digest, then every
    parameter followed by every running-stat buffer, in declaration order,
    as shape-prefixed little-endian float64 blocks."""
    arrays = [p.data for p in model.parameters()] + list(model.buffers())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(model.config.digest())
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(model: Model, path) -> Model:
    """Restore parameters and running stats saved by save_checkpoint.

    The checkpoint must match the model's config digest; shape disagreement
    or a short file is a format error.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"checkpoint truncated at byte {off} of {len(blob)}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic")
    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    digest = take(16)
    if digest != model.config.digest():
        raise DataFormatError("checkpoint was written for a different configuration")
    count = struct.unpack("<I", take(4))[0]
    targets = [p.data for p in model.parameters()] + list(model.buffers())
    if count != len(targets):
        raise DataFormatError(f"checkpoint holds {count} tensors, model needs {len(targets)}")
    for target in targets:
        ndim = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if shape != target.shape:
            raise DataFormatError(f"tensor shape {shape} does not match model's {target.shape}")
        data = np.frombuffer(take(8 * int(np.prod(shape) if ndim else 1)), dtype="<f8")
        np.copyto(target, data.reshape(shape))
    if off != len(blob):
        raise DataFormatError(f"{len(blob) - off} trailing bytes after last tensor")
    return model


def model_from_checkpoint(config: NetConfig, path) -> Model:
    model = build_model(config, RngStream(0, "checkpoint-load"))
    return load_checkpoint(model, path)
