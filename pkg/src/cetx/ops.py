"""Differentiable array operations for 1-D convolutional networks.

Ops take and return Tensors, compute forward values with plain numpy, and
register a backward closure on the active tape. Batched inputs are
(N, C, L) for convolutional ops and (N, D) for dense ops; a single example
(C, L) or (D,) is promoted internally and the batch axis removed on return.
All ops preserve the input dtype so the same code path serves float32
training and float64 gradient checking.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record

__all__ = [
    "conv1d",
    "max_pool1d",
    "pooled_length",
    "normalize",
    "instance_norm",
    "layer_norm",
    "prelu",
    "dense",
    "global_avg_pool",
    "dropout",
    "softmax",
    "log_softmax",
    "cross_entropy_with_logits",
    "grad_check",
    "GradCheckResult",
    "counters",
]


class _Counters:
    """Forward-invocation tallies, used to assert computation-sharing
    properties (the trunk must run once however many exits are read)."""

    __slots__ = ("conv1d",)

    def __init__(self):
        self.conv1d = 0

    def reset(self):
        self.conv1d = 0


counters = _Counters()


def _promote_clc(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x.data[None, :, :], True
    if x.ndim == 3:
        return x.data, False
    raise ValueError(f"expected (C, L) or (N, C, L) input, got shape {x.shape}")


def _promote_nd(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 1:
        return x.data[None, :], True
    if x.ndim == 2:
        return x.data, False
    raise ValueError(f"expected (D,) or (N, D) input, got shape {x.shape}")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlation along the last axis, stride 1, same padding.

    Padding splits as K//2 on the left and K-1-K//2 on the right so the
    output length equals the input length for any kernel size.
    """
    xd, squeeze = _promote_clc(x)
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be (out, in, k), got shape {weight.shape}")
    out_ch, in_ch, k = weight.shape
    n, c, length = xd.shape
    if c != in_ch:
        raise ValueError(f"conv1d channel mismatch: input has {c}, weight expects {in_ch}")
    if bias.shape != (out_ch,):
        raise ValueError(f"conv1d bias must be ({out_ch},), got shape {bias.shape}")
    counters.conv1d += 1

    pad_l = k // 2
    pad_r = k - 1 - pad_l
    xp = np.pad(xd, ((0, 0), (0, 0), (pad_l, pad_r)))
    win = sliding_window_view(xp, k, axis=2)  # (N, C, L, K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * length, c * k)
    w2 = weight.data.reshape(out_ch, c * k)
    out_data = (cols @ w2.T).reshape(n, length, out_ch).transpose(0, 2, 1) + bias.data[None, :, None]
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data)

    need_x = x.requires_grad

    def backward_fn(g):
        gb = g[None] if squeeze else g
        gm = np.ascontiguousarray(gb.transpose(0, 2, 1)).reshape(n * length, out_ch)
        db = gm.sum(axis=0)
        dw = (gm.T @ cols).reshape(out_ch, c, k)
        dx = None
        if need_x:
            dwin = (gm @ w2).reshape(n, length, c, k).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp)
            for kk in range(k):
                dxp[:, :, kk : kk + length] += dwin[:, :, :, kk]
            dx = dxp[:, :, pad_l : pad_l + length]
            if squeeze:
                dx = dx[0]
        return dx, dw, db

    return record("conv1d", out, (x, weight, bias), backward_fn)


def pooled_length(length: int, pool: int, stride: int) -> int:
    """Output length of ceil-mode pooling; the last window may overhang the
    end but must start inside the input."""
    if length < 1:
        raise ValueError(f"pooling needs a non-empty input, got length {length}")
    n_out = max(1, -(-(length - pool) // stride) + 1)
    while (n_out - 1) * stride >= length:
        n_out -= 1
    return n_out


def max_pool1d(x: Tensor, pool: int, stride: int | None = None) -> Tensor:
    """Ceil-mode max pooling along the last axis.

    Overhanging window positions are filled with -inf so they never win the
    max; ties resolve to the earliest position.
    """
    if pool < 1:
        raise ValueError(f"pool size must be >= 1, got {pool}")
    stride = pool if stride is None else stride
    if stride < 1:
        raise ValueError(f"pool stride must be >= 1, got {stride}")
    xd, squeeze = _promote_clc(x)
    n, c, length = xd.shape
    n_out = pooled_length(length, pool, stride)
    needed = (n_out - 1) * stride + pool
    xp = np.pad(xd, ((0, 0), (0, 0), (0, needed - length)), constant_values=-np.inf) if needed > length else xd
    win = sliding_window_view(xp, pool, axis=2)[:, :, ::stride, :]  # (N, C, n_out, P)
    idx = np.argmax(win, axis=3)
    out_data = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data)

    pos = idx + (np.arange(n_out) * stride)[None, None, :]

    def backward_fn(g):
        gb = g[None] if squeeze else g
        dxp = np.zeros((n, c, needed), dtype=gb.dtype)
        n_i = np.arange(n)[:, None, None]
        c_i = np.arange(c)[None, :, None]
        if stride >= pool:
            dxp[n_i, c_i, pos] = gb
        else:
            np.add.at(dxp, (n_i, c_i, pos), gb)
        dx = dxp[:, :, :length]
        if squeeze:
            dx = dx[0]
        return (dx,)

    return record("max_pool1d", out, (x,), backward_fn)


def _norm(op: str, x: Tensor, axes: tuple[int, ...], gain: Tensor | None, shift: Tensor | None, eps: float) -> Tensor:
    xd, squeeze = _promote_clc(x)
    n, c, length = xd.shape
    if (gain is None) != (shift is None):
        raise ValueError(f"{op} needs gain and shift together or neither")
    if gain is not None and (gain.shape != (c,) or shift.shape != (c,)):
        raise ValueError(f"{op} gain/shift must be ({c},), got {gain.shape} and {shift.shape}")

    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * inv
    m = 1
    for ax in axes:
        m *= xd.shape[ax]
    if gain is not None:
        out_data = xhat * gain.data.reshape(c, 1) + shift.data.reshape(c, 1)
    else:
        out_data = xhat
    out = Tensor(out_data[0] if squeeze else out_data)

    inputs = (x,) if gain is None else (x, gain, shift)

    def backward_fn(g):
        gb = g[None] if squeeze else g
        if gain is not None:
            dgain = (gb * xhat).sum(axis=(0, 2))
            dshift = gb.sum(axis=(0, 2))
            dxhat = gb * gain.data.reshape(c, 1)
        else:
            dxhat = gb
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / m
        )
        if squeeze:
            dx = dx[0]
        if gain is None:
            return (dx,)
        return dx, dgain, dshift

    return record(op, out, inputs, backward_fn)


def normalize(x: Tensor, mode: str, gain: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Standardize `x` and apply an optional per-channel affine.

    mode "instance": each channel of each example over its length;
    mode "layer": each example over all channels and positions jointly.
    """
    if mode == "instance":
        return instance_norm(x, gain, shift, eps)
    if mode == "layer":
        return layer_norm(x, gain, shift, eps)
    raise ValueError(f"unknown normalization mode {mode!r}, expected 'instance' or 'layer'")


def instance_norm(x: Tensor, gain: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of each example over its length to zero mean
    and unit variance, then apply an optional per-channel affine."""
    return _norm("instance_norm", x, (-1,), gain, shift, eps)


def layer_norm(x: Tensor, gain: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each example over all channels and positions jointly, then
    apply an optional per-channel affine."""
    return _norm("layer_norm", x, (-2, -1), gain, shift, eps)


def prelu(x: Tensor, slopes: Tensor, axis: int = -1) -> Tensor:
    """Parametric ReLU: identity for x >= 0, a learned slope below zero.

    `axis` selects the axis the slope vector runs along: the channel axis
    (-2) for convolutional features, the feature axis (-1) for dense ones.
    """
    if slopes.ndim != 1:
        raise ValueError(f"prelu slopes must be 1-D, got shape {slopes.shape}")
    ax = axis % x.ndim
    if x.shape[ax] != slopes.shape[0]:
        raise ValueError(f"prelu slope shape {slopes.shape} does not match axis {axis} of input shape {x.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = -1
    a = slopes.data.reshape(bshape)
    xd = x.data
    neg = xd < 0
    out = Tensor(np.where(neg, a * xd, xd))
    reduce_axes = tuple(i for i in range(x.ndim) if i != ax)

    def backward_fn(g):
        dx = np.where(neg, a, xd.dtype.type(1)) * g
        da = np.where(neg, xd * g, 0).sum(axis=reduce_axes)
        return dx, da

    return record("prelu", out, (x, slopes), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W.T + b with W of shape (out, in)."""
    xd, squeeze = _promote_nd(x)
    if weight.ndim != 2:
        raise ValueError(f"dense weight must be (out, in), got shape {weight.shape}")
    out_d, in_d = weight.shape
    if xd.shape[1] != in_d:
        raise ValueError(f"dense input has {xd.shape[1]} features, weight expects {in_d}")
    if bias.shape != (out_d,):
        raise ValueError(f"dense bias must be ({out_d},), got shape {bias.shape}")
    out_data = xd @ weight.data.T + bias.data
    out = Tensor(out_data[0] if squeeze else out_data)

    need_x = x.requires_grad

    def backward_fn(g):
        gb = g[None] if squeeze else g
        dw = gb.T @ xd
        db = gb.sum(axis=0)
        dx = gb @ weight.data if need_x else None
        if dx is not None and squeeze:
            dx = dx[0]
        return dx, dw, db

    return record("dense", out, (x, weight, bias), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the length axis: (N, C, L) -> (N, C)."""
    xd, squeeze = _promote_clc(x)
    n, c, length = xd.shape
    out_data = xd.mean(axis=2)
    out = Tensor(out_data[0] if squeeze else out_data)

    def backward_fn(g):
        gb = g[None] if squeeze else g
        dx = np.broadcast_to(gb[:, :, None] / xd.dtype.type(length), (n, c, length)).copy()
        if squeeze:
            dx = dx[0]
        return (dx,)

    return record("global_avg_pool", out, (x,), backward_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: in training, zero each element with probability
    `rate` and scale survivors by 1/(1-rate); outside training, identity.

    Consumes exactly one rng.random(shape) draw in training mode so keyed
    generators stay reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    out = Tensor(x.data * keep * scale)

    def backward_fn(g):
        return (g * keep * scale,)

    return record("dropout", out, (x,), backward_fn)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax on a plain array (no gradient)."""
    z = np.asarray(logits)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax on a plain array (no gradient)."""
    z = np.asarray(logits)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def cross_entropy_with_logits(logits: Tensor, target: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean weighted cross entropy between softmax(logits) and target rows.

    `target` is a constant (N, K) array of probabilities (one-hot or soft);
    `weights` is an optional per-example factor. The mean is over all N
    rows, so zero-weighted rows still count in the denominator.
    """
    ld, squeeze = _promote_nd(logits)
    t = np.asarray(target, dtype=ld.dtype)
    if squeeze:
        t = t[None] if t.ndim == 1 else t
    if t.shape != ld.shape:
        raise ValueError(f"target shape {t.shape} does not match logits shape {ld.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("cross entropy target contains non-finite values")
    n = ld.shape[0]
    if weights is None:
        w = None
    else:
        w = np.asarray(weights, dtype=ld.dtype).reshape(-1)
        if w.shape != (n,):
            raise ValueError(f"weights must have shape ({n},), got {w.shape}")

    m = ld.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(ld - m).sum(axis=1, keepdims=True))
    # CE_n = sum_k t_k (lse - z_k); written with an explicit t-mass factor
    # so rows with all-zero targets contribute exactly zero.
    per_row = lse[:, 0] * t.sum(axis=1) - (t * ld).sum(axis=1)
    if w is not None:
        per_row = per_row * w
    out = Tensor(np.asarray(per_row.sum() / n, dtype=ld.dtype))

    def backward_fn(g):
        p = np.exp(ld - lse)
        dz = (p * t.sum(axis=1, keepdims=True) - t) / ld.dtype.type(n)
        if w is not None:
            dz = dz * w[:, None]
        dz = dz * g
        if squeeze:
            dz = dz[0]
        return (dz,)

    return record("cross_entropy", out, (logits,), backward_fn)


class GradCheckResult:
    """Outcome of a finite-difference gradient comparison."""

    def __init__(self):
        self.per_tensor: dict[str, float] = {}
        self.failures: list[tuple[str, tuple, float, float, float]] = []
        self.max_rel_err = 0.0
        self.worst: tuple[str, tuple] | None = None
        self.ok = True
        self.tol = 0.0

    def summary(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        lines = [f"gradient check {status}: max relative error {self.max_rel_err:.3e} (tol {self.tol:.1e})"]
        for name, err in sorted(self.per_tensor.items()):
            lines.append(f"  {name}: max rel err {err:.3e}")
        for name, idx, ana, num, rel in self.failures[:20]:
            lines.append(f"  FAIL {name}{list(idx)}: analytic {ana:.6e} numeric {num:.6e} rel {rel:.3e}")
        return "\n".join(lines)


def grad_check(fn, tensors, tol: float = 1e-4, h: float = 1e-5) -> GradCheckResult:
    """Compare backward-pass gradients of fn() against central differences.

    `fn` must build and return a scalar loss Tensor from the given tensors;
    each entry of `tensors` is (name, Tensor) or a Parameter. Everything is
    required to be float64: float32 rounding would drown the comparison.
    Relative error is |a - n| / max(|a|, |n|, 1e-8), checked elementwise.
    """
    from .tensor import Tape, backward

    named = []
    for entry in tensors:
        if isinstance(entry, tuple):
            named.append(entry)
        else:
            named.append((entry.name, entry.value))
    for name, t in named:
        if t.data.dtype != np.float64:
            raise ValueError(f"gradient check requires float64 tensors, {name} is {t.data.dtype}")

    for _, t in named:
        t.zero_grad()
    with Tape():
        loss = fn()
        if loss.shape != ():
            raise ValueError(f"gradient check needs a scalar loss, got shape {loss.shape}")
        backward(loss)
    analytic = {name: np.array(t.grad, copy=True) for name, t in named}

    result = GradCheckResult()
    result.tol = tol
    for name, t in named:
        ana = analytic[name]
        worst = 0.0
        buf = t.data
        for idx in np.ndindex(t.shape):
            orig = buf[idx]
            buf[idx] = orig + h
            f_plus = float(fn().data)
            buf[idx] = orig - h
            f_minus = float(fn().data)
            buf[idx] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            a = float(ana[idx])
            if not (np.isfinite(a) and np.isfinite(num)):
                result.ok = False
                result.failures.append((name, idx, a, num, np.inf))
                worst = np.inf
                continue
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if rel > worst:
                worst = rel
            if rel > result.max_rel_err:
                result.max_rel_err = rel
                result.worst = (name, idx)
            if rel > tol:
                result.ok = False
                result.failures.append((name, idx, a, num, rel))
        result.per_tensor[name] = worst
    return result
