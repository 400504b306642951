"""Global intensity non-linear augmentation.

Each augmented view pushes a volume through a freshly randomized shallow
conv net, optionally rescales the result back to the input's intensity
statistics, and blends it with the original at a random mixing weight.
The networks are never trained; diversity comes entirely from resampling
their weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .rng import RngStream
from .tensor import conv3d_raw


@dataclass
class GinConfig:
    n_layers: int = 2
    hidden_channels: int = 2
    kernel: tuple = (3, 3, 3)
    leaky_slope: float = 0.2
    renormalize: bool = True
    views_per_image: int = 5

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigurationError(f"need at least one layer, got {self.n_layers}")
        if self.hidden_channels < 1:
            raise ConfigurationError(
                f"hidden_channels must be positive, got {self.hidden_channels}")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigurationError(
                f"kernel must be three odd extents so padding can preserve shape, "
                f"got {self.kernel}")
        if self.views_per_image < 1:
            raise ConfigurationError(
                f"views_per_image must be >= 1, got {self.views_per_image}")


@dataclass
class GinNetwork:
    """Frozen random conv stack mapping one channel back to one channel."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    leaky_slope: float = 0.2

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3:
            raise DimensionError(f"expected a (depth, height, width) volume, got {x.shape}")
        h = x[None, None].astype(np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pad = tuple(k // 2 for k in w.shape[2:])
            h = conv3d_raw(h, w, b, (1, 1, 1), pad)
            if i != last:
                h = np.where(h > 0.0, h, self.leaky_slope * h)
        return h[0, 0]


def sample_gin(rng: RngStream, config: GinConfig) -> GinNetwork:
    """Draw a fresh network; consecutive calls on one stream give
    independent draws."""
    widths = [1] + [config.hidden_channels] * (config.n_layers - 1) + [1]
    net = GinNetwork(leaky_slope=config.leaky_slope)
    kd, kh, kw = config.kernel
    for cin, cout in zip(widths[:-1], widths[1:]):
        fan_in = cin * kd * kh * kw
        net.weights.append(rng.normal((cout, cin, kd, kh, kw)) / np.sqrt(fan_in))
        net.biases.append(rng.normal((cout,)) * 0.1)
    return net


def _rescale_to(y: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Match target's per-volume mean and std; mean only when y is constant."""
    mean_y, std_y = y.mean(), y.std()
    if std_y < 1e-12:
        return y - mean_y + target.mean()
    return (y - mean_y) / std_y * target.std() + target.mean()


def augment(x: np.ndarray, g: GinNetwork, alpha: float, config: GinConfig) -> np.ndarray:
    """alpha-blend of x with g(x), optionally intensity-renormalized.

    alpha 0 returns x itself (bit-exact), alpha 1 the fully remapped volume.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if not np.isfinite(x).all():
        raise ContractError("input volume must be finite")
    if alpha == 0.0:
        return x.copy()
    y = g(x)
    if config.renormalize:
        y = _rescale_to(y, x)
    return alpha * y + (1.0 - alpha) * x


def augment_views(x: np.ndarray, rng: RngStream, config: GinConfig) -> list:
    """config.views_per_image independent augmentations of one volume.

    Each view draws its own network and its own alpha ~ U(0,1) from the
    stream, so the full list is reproducible from the stream's seed/label.
    """
    views = []
    for _ in range(config.views_per_image):
        g = sample_gin(rng, config)
        alpha = float(rng.uniform())
        views.append(augment(x, g, alpha, config))
    return views


def write_center_slice_pgm(volume: np.ndarray, path) -> None:
    """Dump the middle axial slice as an 8-bit binary portable graymap."""
    if volume.ndim != 3:
        raise DimensionError(f"expected a (depth, height, width) volume, got {volume.shape}")
    sl = volume[volume.shape[0] // 2]
    lo, hi = sl.min(), sl.max()
    if hi > lo:
        gray = np.round((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        gray = np.zeros_like(sl, dtype=np.uint8)
    header = f"P5\n{sl.shape[1]} {sl.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + gray.tobytes())
