"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: it provides exactly the operations the
3D classification network and its losses need, nothing more. Ops compute
eagerly with numpy; when a Tape is active and an input participates in
differentiation, the op records a pullback so `backward` can replay the
tape in reverse and accumulate gradients into the leaves.

Everything is double precision internally, which keeps the central
finite-difference checks in the test suite sharp.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "RunningStats",
    "SGD",
    "conv3d",
    "maxpool3d",
    "relu",
    "batch_norm",
    "instance_norm",
    "global_avg_pool",
    "linear",
    "softmax",
    "log_softmax",
    "numeric_gradient",
]

# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of executed ops, replayed in reverse for gradients.

    Ops append entries in execution order, so the list is topologically
    sorted by construction: an entry's inputs are either leaves or outputs
    of earlier entries. Entering the tape as a context manager makes it the
    recording target; with no active tape, ops run forward-only.
    """

    def __init__(self):
        self.entries: list[tuple[str, Tensor, list[tuple[Tensor, Callable]]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def record(self, op: str, output: "Tensor", pullbacks) -> None:
        self.entries.append((op, output, pullbacks))

    def backward(self, loss: "Tensor") -> None:
        backward(self, loss)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: "Tensor") -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every participating leaf.

    Gradients add across multiple uses of a tensor and across repeated
    backward calls; call ``SGD.zero_grad`` (or clear ``.grad``) between
    steps. The loss must be a scalar produced through `tape`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss._accumulate(np.ones_like(loss.data))
    for _op, output, pullbacks in reversed(tape.entries):
        g = output.grad
        if g is None:
            continue
        for tensor, pullback in pullbacks:
            tensor._accumulate(pullback(g))


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """N-dimensional float64 array with optional gradient participation."""

    __slots__ = ("data", "grad", "grad_enabled")

    def __init__(self, data, grad_enabled: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.grad_enabled = grad_enabled

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad_enabled={self.grad_enabled})"

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return _binary(
            "add", self, other,
            lambda a, b: a + b,
            lambda g, a, b: g,
            lambda g, a, b: g,
        )

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(
            "sub", self, other,
            lambda a, b: a - b,
            lambda g, a, b: g,
            lambda g, a, b: -g,
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        return _binary(
            "mul", self, other,
            lambda a, b: a * b,
            lambda g, a, b: g * b,
            lambda g, a, b: g * a,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            "div", self, other,
            lambda a, b: a / b,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda g, a, out: -g)

    def __pow__(self, p):
        p = float(p)
        return _unary("pow", self, lambda a: a ** p, lambda g, a, out: g * p * a ** (p - 1.0))

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul needs [M,K]@[K,N], got {self.shape} @ {other.shape}")
        return _binary(
            "matmul", self, other,
            lambda a, b: a @ b,
            lambda g, a, b: g @ b.T,
            lambda g, a, b: a.T @ g,
            broadcast=False,
        )

    def exp(self):
        return _unary("exp", self, np.exp, lambda g, a, out: g * out)

    def log(self):
        return _unary("log", self, np.log, lambda g, a, out: g / a)

    def transpose2d(self):
        if self.ndim != 2:
            raise DimensionError("transpose2d expects a 2-D tensor")
        return _unary("transpose", self, lambda a: a.T.copy(), lambda g, a, out: g.T)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _unary(
            "reshape", self,
            lambda a: a.reshape(shape),
            lambda g, a, out: g.reshape(old),
        )

    def sum(self, axis=None, keepdims: bool = False):
        in_shape = self.data.shape

        def pull(g, a, out):
            if axis is None:
                return np.broadcast_to(g, in_shape).copy()
            ax = axis if isinstance(axis, tuple) else (axis,)
            gg = g if keepdims else np.expand_dims(g, ax)
            return np.broadcast_to(gg, in_shape).copy()

        return _unary("sum", self, lambda a: a.sum(axis=axis, keepdims=keepdims), pull)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(op: str, out: Tensor, pullbacks) -> Tensor:
    tape = _active_tape()
    if tape is not None and pullbacks:
        out.grad_enabled = True
        tape.record(op, out, pullbacks)
    return out


def _unary(op, a: Tensor, fwd, pull) -> Tensor:
    out = Tensor(fwd(a.data))
    pbs = []
    if a.grad_enabled:
        a_data, out_data = a.data, out.data
        pbs.append((a, lambda g: pull(g, a_data, out_data)))
    return _record(op, out, pbs)


def _binary(op, a, b, fwd, pull_a, pull_b, broadcast: bool = True) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(fwd(a.data, b.data))
    pbs = []
    a_data, b_data = a.data, b.data
    if a.grad_enabled:
        if broadcast:
            pbs.append((a, lambda g: _unbroadcast(pull_a(g, a_data, b_data), a_data.shape)))
        else:
            pbs.append((a, lambda g: pull_a(g, a_data, b_data)))
    if b.grad_enabled:
        if broadcast:
            pbs.append((b, lambda g: _unbroadcast(pull_b(g, a_data, b_data), b_data.shape)))
        else:
            pbs.append((b, lambda g: pull_b(g, a_data, b_data)))
    return _record(op, out, pbs)


# ---------------------------------------------------------------------------
# Convolution


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"expected an int or length-3 triple, got {v!r}")
    return t


def conv3d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
               stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    """Plain-array 3D cross-correlation; shared by the op and frozen nets."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"input channels {x.shape[1]} do not match weight channels {w.shape[1]}")
    if any(s < 1 for s in stride):
        raise DimensionError(f"stride components must be >= 1, got {stride}")
    kd, kh, kw = w.shape[2:]
    pd, ph, pw = padding
    if (x.shape[2] + 2 * pd < kd or x.shape[3] + 2 * ph < kh or x.shape[4] + 2 * pw < kw):
        raise DimensionError(
            f"kernel {w.shape[2:]} does not fit padded input {x.shape[2:]} with padding {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    out = np.tensordot(win, w, axes=((1, 5, 6, 7), (1, 2, 3, 4)))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if b is not None:
        out += b[None, :, None, None, None]
    return out


def _conv3d_grad_w(xp: np.ndarray, gout: np.ndarray, ksize, stride) -> np.ndarray:
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    # sum over batch and output positions -> [Cout, Cin, kd, kh, kw]
    return np.tensordot(gout, win, axes=((0, 2, 3, 4), (0, 2, 3, 4)))


def _conv3d_grad_x(gout: np.ndarray, w: np.ndarray, x_shape, stride, padding) -> np.ndarray:
    # Transposed convolution: zero-stuff gout by the stride, then run a full
    # cross-correlation against the flipped, channel-swapped kernel.
    sd, sh, sw = stride
    pd, ph, pw = padding
    kd, kh, kw = w.shape[2:]
    N, _, D, H, W = x_shape
    rd = (D + 2 * pd - kd) % sd
    rh = (H + 2 * ph - kh) % sh
    rw = (W + 2 * pw - kw) % sw
    Do, Ho, Wo = gout.shape[2:]
    dil = np.zeros(
        (N, w.shape[0], (Do - 1) * sd + 1 + rd, (Ho - 1) * sh + 1 + rh, (Wo - 1) * sw + 1 + rw),
        dtype=gout.dtype,
    )
    dil[:, :, ::sd, ::sh, ::sw] = gout
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gx = conv3d_raw(dil, w_flip, None, stride=(1, 1, 1), padding=(kd - 1, kh - 1, kw - 1))
    return gx[:, :, pd : pd + D, ph : ph + H, pw : pw + W]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3D cross-correlation with per-output-channel bias.

    Output spatial size per axis is floor((S + 2p - k)/stride) + 1.
    """
    stride, padding = _triple(stride), _triple(padding)
    if bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={weight.shape[0]}")
    out = Tensor(conv3d_raw(x.data, weight.data, bias.data, stride, padding))
    pbs = []
    x_data, w_data = x.data, weight.data
    ksize = w_data.shape[2:]
    pd, ph, pw = padding
    if x.grad_enabled:
        pbs.append((x, lambda g: _conv3d_grad_x(g, w_data, x_data.shape, stride, padding)))
    if weight.grad_enabled:
        xp = np.pad(x_data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        pbs.append((weight, lambda g: _conv3d_grad_w(xp, g, ksize, stride)))
    if bias.grad_enabled:
        pbs.append((bias, lambda g: g.sum(axis=(0, 2, 3, 4))))
    return _record("conv3d", out, pbs)


def maxpool3d(x: Tensor, window=(2, 2, 2), stride=None) -> Tensor:
    """Max over sliding windows; gradient routes to the first max per window."""
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d expects a 5-D tensor, got shape {x.shape}")
    if any(ws > xs for ws, xs in zip(window, x.shape[2:])):
        raise DimensionError(f"pool window {window} larger than input {x.shape[2:]}")
    win = sliding_window_view(x.data, window, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    N, C, Do, Ho, Wo = win.shape[:5]
    flat = win.reshape(N, C, Do, Ho, Wo, -1)
    arg = flat.argmax(axis=-1)  # first occurrence on ties (raster order)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    pbs = []
    if x.grad_enabled:
        x_shape = x.data.shape

        def pull(g):
            kd, kh, kw = window
            od, oh, ow = np.meshgrid(
                np.arange(Do), np.arange(Ho), np.arange(Wo), indexing="ij")
            ld, rem = np.divmod(arg, kh * kw)
            lh, lw = np.divmod(rem, kw)
            zi = od[None, None] * stride[0] + ld
            yi = oh[None, None] * stride[1] + lh
            xi = ow[None, None] * stride[2] + lw
            ni, ci = np.meshgrid(np.arange(N), np.arange(C), indexing="ij")
            ni = np.broadcast_to(ni[:, :, None, None, None], arg.shape)
            ci = np.broadcast_to(ci[:, :, None, None, None], arg.shape)
            gx = np.zeros(x_shape)
            np.add.at(gx, (ni.ravel(), ci.ravel(), zi.ravel(), yi.ravel(), xi.ravel()), g.ravel())
            return gx

        pbs.append((x, pull))
    return _record("maxpool3d", out, pbs)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at exactly 0."""
    return _unary("relu", x, lambda a: np.maximum(a, 0.0), lambda g, a, out: g * (a > 0.0))


# ---------------------------------------------------------------------------
# Normalization


class RunningStats:
    """Per-channel EMA of batch mean/variance, used by batch norm at inference."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = float(momentum)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var


def _norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], eps: float,
          op: str) -> Tensor:
    """Shared normalize-then-affine core for batch and instance norm."""
    xd = x.data
    m = int(np.prod([xd.shape[a] for a in axes]))
    mean = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * invstd
    gshape = (1, -1, 1, 1, 1)
    out = Tensor(gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape))

    pbs = []
    if x.grad_enabled:
        g_data = gamma.data

        def pull_x(g):
            dxhat = g * g_data.reshape(gshape)
            t1 = dxhat.sum(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            return invstd / m * (m * dxhat - t1 - xhat * t2)

        pbs.append((x, pull_x))
    affine_axes = tuple(i for i in range(5) if i != 1)
    if gamma.grad_enabled:
        pbs.append((gamma, lambda g: (g * xhat).sum(axis=affine_axes)))
    if beta.grad_enabled:
        pbs.append((beta, lambda g: g.sum(axis=affine_axes)))
    return _record(op, out, pbs), mean, var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               training: bool = True, running_stats: RunningStats | None = None) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    Training mode normalizes by batch statistics and folds them into
    `running_stats`; inference mode normalizes by the running statistics.
    """
    if x.ndim != 5:
        raise DimensionError(f"batch_norm expects [N,C,D,H,W], got shape {x.shape}")
    if training:
        out, mean, var = _norm(x, gamma, beta, (0, 2, 3, 4), eps, "batch_norm")
        if running_stats is not None:
            running_stats.update(mean.reshape(-1), var.reshape(-1))
        return out
    if running_stats is None:
        raise ContractError("batch_norm inference requires running statistics")
    gshape = (1, -1, 1, 1, 1)
    invstd = 1.0 / np.sqrt(running_stats.var + eps)
    scale = (gamma.data * invstd).reshape(gshape)
    shift = (beta.data - gamma.data * running_stats.mean * invstd).reshape(gshape)
    out = Tensor(x.data * scale + shift)
    pbs = []
    if x.grad_enabled:
        pbs.append((x, lambda g: g * scale))
    if gamma.grad_enabled:
        xh = ((x.data - running_stats.mean.reshape(gshape)) * invstd.reshape(gshape))
        pbs.append((gamma, lambda g: (g * xh).sum(axis=(0, 2, 3, 4))))
    if beta.grad_enabled:
        pbs.append((beta, lambda g: g.sum(axis=(0, 2, 3, 4))))
    return _record("batch_norm_eval", out, pbs)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes only.

    Identical in training and inference; by construction the output is
    invariant to any per-sample affine remap a*x + b with a > 0.
    """
    if x.ndim != 5:
        raise DimensionError(f"instance_norm expects [N,C,D,H,W], got shape {x.shape}")
    out, _, _ = _norm(x, gamma, beta, (2, 3, 4), eps, "instance_norm")
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions -> [N, C]."""
    if x.ndim != 5:
        raise DimensionError(f"global_avg_pool expects [N,C,D,H,W], got shape {x.shape}")
    m = x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
    return _unary(
        "global_avg_pool", x,
        lambda a: a.mean(axis=(2, 3, 4)),
        lambda g, a, out: np.broadcast_to(
            g[:, :, None, None, None] / m, a.shape).copy(),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W^T + b for x [N,F], W [O,F], b [O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shapes incompatible: {x.shape} with {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match O={weight.shape[0]}")
    out = Tensor(x.data @ weight.data.T + bias.data)
    pbs = []
    x_data, w_data = x.data, weight.data
    if x.grad_enabled:
        pbs.append((x, lambda g: g @ w_data))
    if weight.grad_enabled:
        pbs.append((weight, lambda g: g.T @ x_data))
    if bias.grad_enabled:
        pbs.append((bias, lambda g: g.sum(axis=0)))
    return _record("linear", out, pbs)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if x.ndim != 2:
        raise DimensionError(f"softmax expects [N,K], got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    pbs = []
    if x.grad_enabled:
        pbs.append((x, lambda g: s * (g - (g * s).sum(axis=1, keepdims=True))))
    return _record("softmax", out, pbs)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax via the log-sum-exp trick."""
    if x.ndim != 2:
        raise DimensionError(f"log_softmax expects [N,K], got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(z - lse)
    pbs = []
    if x.grad_enabled:
        s = np.exp(out.data)
        pbs.append((x, lambda g: g - s * g.sum(axis=1, keepdims=True)))
    return _record("log_softmax", out, pbs)


# ---------------------------------------------------------------------------
# Oracles and optimization


def numeric_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                     step: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of a scalar function at x."""
    grad = np.zeros_like(x.data)
    flat = x.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(_scalar(f(x)))
        flat[i] = orig - step
        lo = float(_scalar(f(x)))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        if v.data.size != 1:
            raise ContractError("numeric_gradient requires a scalar-valued function")
        return float(v.data.item())
    return float(v)


class SGD:
    """Momentum SGD: v <- momentum*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
