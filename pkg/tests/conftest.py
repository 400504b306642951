"""Shared oracles for the test suite.

These are deliberately naive reference implementations (nested loops,
exhaustive scans) kept independent from the library code they check.
"""

import numpy as np
import pytest

from kneedg.tensor import Tensor, Tape, backward, numeric_gradient


def conv3d_loops(x, w, b, stride, padding):
    """Direct six-nested-loop cross-correlation."""
    N, Cin, D, H, W = x.shape
    Cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.zeros((N, Cin, D + 2 * pd, H + 2 * ph, W + 2 * pw))
    xp[:, :, pd:pd + D, ph:ph + H, pw:pw + W] = x
    Do = (D + 2 * pd - kd) // sd + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, Cout, Do, Ho, Wo))
    for n in range(N):
        for co in range(Cout):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        acc = b[co]
                        for ci in range(Cin):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        acc += (w[co, ci, a, bb, c]
                                                * xp[n, ci, od * sd + a, oh * sh + bb, ow * sw + c])
                        out[n, co, od, oh, ow] = acc
    return out


def maxpool3d_scan(x, window, stride):
    """Brute-force window max."""
    N, C, D, H, W = x.shape
    wd, wh, ww = window
    sd, sh, sw = stride
    Do = (D - wd) // sd + 1
    Ho = (H - wh) // sh + 1
    Wo = (W - ww) // sw + 1
    out = np.empty((N, C, Do, Ho, Wo))
    for n in range(N):
        for c in range(C):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        block = x[n, c,
                                  od * sd:od * sd + wd,
                                  oh * sh:oh * sh + wh,
                                  ow * sw:ow * sw + ww]
                        out[n, c, od, oh, ow] = block.max()
    return out


def grad_check(make_loss, leaves, step=1e-3, tol=1e-4, atol=1e-7):
    """Compare tape gradients against central finite differences.

    `make_loss(*leaves)` must build a scalar Tensor from the given leaf
    tensors. Returns the worst relative error across all leaves.

    Leaves whose gradient is essentially zero (e.g. a conv bias that a
    following normalization cancels exactly) are judged by `atol` instead:
    finite differences only measure roundoff noise there, so a relative
    error is meaningless.
    """
    for leaf in leaves:
        leaf.grad = None
        leaf.grad_enabled = True
    with Tape() as tape:
        loss = make_loss(*leaves)
    backward(tape, loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(t, idx=i):
            args = [Tensor(l.data) for l in leaves]
            args[idx] = t
            return make_loss(*args)
        numeric = numeric_gradient(f, Tensor(leaf.data.copy()), step)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        diff = np.abs(analytic - numeric).max()
        if diff <= atol:
            continue
        scale = max(np.abs(numeric).max(), 1e-8)
        worst = max(worst, diff / scale)
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
