"""Differentiable primitives: element-wise math, conv2d, norm, pooling.

Each op computes with plain numpy, then (if a Graph is active and an operand
participates in differentiation) records an adjoint closure on the tape.
conv2d lowers to im2col + one GEMM; taps whose receptive field lies entirely
in the zero padding are skipped, which matters for M=1 grids.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tensor import DTYPE, Graph, Tensor, as_tensor


def _make_output(data: np.ndarray, *inputs: Tensor) -> tuple[Tensor, bool]:
    graph = Graph.current()
    track = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    return out, track


def _record(out: Tensor, backward_fn) -> None:
    Graph.current().record(out, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were expanded by numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_op(a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"operand shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None
    out, track = _make_output(data, a, b)
    if track:
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(da(g, a.data, b.data), a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(db(g, a.data, b.data), b.shape))
        _record(out, backward_fn)
    return out


def add(a, b) -> Tensor:
    return _broadcast_op(a, b, lambda x, y: x + y,
                         lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _broadcast_op(a, b, lambda x, y: x - y,
                         lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _broadcast_op(a, b, lambda x, y: x * y,
                         lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    factor = float(factor)
    out, track = _make_output(a.data * factor, a)
    if track:
        def backward_fn(g):
            a.accumulate_grad(g * factor)
        _record(out, backward_fn)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out, track = _make_output(np.maximum(x.data, 0.0), x)
    if track:
        mask = x.data > 0
        def backward_fn(g):
            x.accumulate_grad(g * mask)
        _record(out, backward_fn)
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out, track = _make_output(x.data * sig, x)
    if track:
        def backward_fn(g):
            x.accumulate_grad(g * sig * (1.0 + x.data * (1.0 - sig)))
        _record(out, backward_fn)
    return out


def mean_all(x) -> Tensor:
    """Mean over all entries, returned as a scalar tensor."""
    x = as_tensor(x)
    out, track = _make_output(np.asarray(x.data.mean()), x)
    if track:
        inv_n = 1.0 / x.size
        def backward_fn(g):
            x.accumulate_grad(np.full_like(x.data, float(g) * inv_n))
        _record(out, backward_fn)
    return out


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out, track = _make_output(np.asarray(x.data.sum()), x)
    if track:
        def backward_fn(g):
            x.accumulate_grad(np.full_like(x.data, float(g)))
        _record(out, backward_fn)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out, track = _make_output(x.data.reshape(shape), x)
    if track:
        def backward_fn(g):
            x.accumulate_grad(g.reshape(x.shape))
        _record(out, backward_fn)
    return out


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b). x: [N, din], w: [din, dout], b: [dout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear expects [N,din] @ [din,dout], got {x.shape} and {w.shape}")
    data = x.data @ w.data
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        data = data + b.data
        inputs.append(b)
    out, track = _make_output(data, *inputs)
    if track:
        def backward_fn(g):
            if x.requires_grad:
                x.accumulate_grad(g @ w.data.T)
            if w.requires_grad:
                w.accumulate_grad(x.data.T @ g)
            if b is not None and b.requires_grad:
                b.accumulate_grad(g.sum(axis=0))
        _record(out, backward_fn)
    return out


def groupnorm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel-group) to zero mean / unit variance.

    eps guards the zero-variance case (constant inputs occur with zero masks).
    gamma/beta are per-channel affine parameters.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"groupnorm expects [B,C,H,W], got shape {x.shape}")
    b_n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ConfigurationError(f"channel count {c} is not divisible by groups={groups}")
    grouped = x.data.reshape(b_n, groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mean) * inv).reshape(b_n, c, h, w)
    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)
    out, track = _make_output(xhat * gam + bet, x, gamma, beta)
    if track:
        def backward_fn(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
            if x.requires_grad:
                n = c // groups * h * w
                dxhat = (g * gam).reshape(b_n, groups, -1)
                xh = xhat.reshape(b_n, groups, -1)
                s1 = dxhat.sum(axis=2, keepdims=True)
                s2 = (dxhat * xh).sum(axis=2, keepdims=True)
                dx = inv * (dxhat - s1 / n - xh * s2 / n)
                x.accumulate_grad(dx.reshape(b_n, c, h, w))
        _record(out, backward_fn)
    return out


def _active_taps(k_h: int, k_w: int, h: int, w: int) -> list[tuple[int, int]]:
    """Kernel offsets whose shifted window overlaps the unpadded input."""
    p_h, p_w = (k_h - 1) // 2, (k_w - 1) // 2
    return [(di, dj)
            for di in range(k_h) for dj in range(k_w)
            if abs(di - p_h) < h and abs(dj - p_w) < w]


def _im2col(xp: np.ndarray, taps, h: int, w: int) -> np.ndarray:
    """Gather shifted views into a [len(taps)*Cin, B*H*W] matrix, tap-major rows."""
    b_n, c_in = xp.shape[:2]
    patches = np.empty((len(taps), b_n, c_in, h, w), dtype=DTYPE)
    for idx, (di, dj) in enumerate(taps):
        patches[idx] = xp[:, :, di:di + h, dj:dj + w]
    return patches.transpose(0, 2, 1, 3, 4).reshape(len(taps) * c_in, b_n * h * w)


def conv2d(x, w, bias=None) -> Tensor:
    """'Same' cross-correlation: [B,Cin,H,W] * [Cout,Cin,k,k] -> [B,Cout,H,W].

    Odd kernel only; zero padding of (k-1)/2 keeps spatial dims. Width-1
    inputs take a copy-free per-tap batched matmul path (only the center
    kernel column overlaps the input); wider inputs go through im2col plus
    a single GEMM.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    b_n, c_in, h, wd = x.shape
    c_out, c_in_w, k_h, k_w = w.shape
    if c_in != c_in_w:
        raise DimensionError(
            f"input channels mismatch: x has Cin={c_in}, kernel expects Cin={c_in_w}"
        )
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise ConfigurationError(f"kernel dims must be odd, got {k_h}x{k_w}")
    if wd == 1:
        return _conv2d_width1(x, w, bias, b_n, c_in, h, c_out, k_h, k_w)
    return _conv2d_im2col(x, w, bias, b_n, c_in, h, wd, c_out, k_h, k_w)


def _conv2d_width1(x, w, bias, b_n, c_in, h, c_out, k_h, k_w):
    """Width-1 path: one GEMM over the padded grid in channel-first layout.

    Y[di*Cout+o, b, hp] = (W_di @ xq)[o, b, hp]; the output accumulates the
    k_h shifted slices of Y, so no im2col buffer is materialized.
    """
    p_h, p_w = (k_h - 1) // 2, (k_w - 1) // 2
    rows = [di for di in range(k_h) if abs(di - p_h) < h]
    h_pad = h + 2 * p_h
    xq = np.zeros((c_in, b_n, h_pad), dtype=DTYPE)
    xq[:, :, p_h:p_h + h] = x.data[:, :, :, 0].transpose(1, 0, 2)
    w_stack = np.ascontiguousarray(
        w.data[:, :, rows, p_w].transpose(2, 0, 1)).reshape(len(rows) * c_out, c_in)
    y = (w_stack @ xq.reshape(c_in, b_n * h_pad)).reshape(len(rows), c_out, b_n, h_pad)
    acc = np.zeros((c_out, b_n, h), dtype=DTYPE)
    for idx, di in enumerate(rows):
        acc += y[idx, :, :, di:di + h]
    out_data = acc.transpose(1, 0, 2)[:, :, :, None]

    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} does not match Cout={c_out}")
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
        inputs.append(bias)
    out, track = _make_output(out_data, *inputs)
    if track:
        def backward_fn(g):
            g_cbh = np.ascontiguousarray(g[:, :, :, 0].transpose(1, 0, 2))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g_cbh.sum(axis=(1, 2)))
            gy = np.zeros((len(rows), c_out, b_n, h_pad), dtype=DTYPE)
            for idx, di in enumerate(rows):
                gy[idx, :, :, di:di + h] = g_cbh
            gy_mat = gy.reshape(len(rows) * c_out, b_n * h_pad)
            if w.requires_grad:
                gw_stack = gy_mat @ xq.reshape(c_in, b_n * h_pad).T
                gw = np.zeros_like(w.data)
                gw[:, :, rows, p_w] = gw_stack.reshape(
                    len(rows), c_out, c_in).transpose(1, 2, 0)
                w.accumulate_grad(gw)
            if x.requires_grad:
                gxq = (w_stack.T @ gy_mat).reshape(c_in, b_n, h_pad)
                x.accumulate_grad(
                    gxq[:, :, p_h:p_h + h].transpose(1, 0, 2)[:, :, :, None])
        _record(out, backward_fn)
    return out


def _conv2d_im2col(x, w, bias, b_n, c_in, h, wd, c_out, k_h, k_w):
    p_h, p_w = (k_h - 1) // 2, (k_w - 1) // 2
    taps = _active_taps(k_h, k_w, h, wd)
    xp = np.zeros((b_n, c_in, h + 2 * p_h, wd + 2 * p_w), dtype=DTYPE)
    xp[:, :, p_h:p_h + h, p_w:p_w + wd] = x.data
    cols = _im2col(xp, taps, h, wd)
    wmat = np.stack([w.data[:, :, di, dj] for di, dj in taps], axis=0)
    wmat = wmat.transpose(1, 0, 2).reshape(c_out, len(taps) * c_in)
    out_data = (wmat @ cols).reshape(c_out, b_n, h, wd).transpose(1, 0, 2, 3)

    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} does not match Cout={c_out}")
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
        inputs.append(bias)
    out, track = _make_output(out_data, *inputs)
    if track:
        def backward_fn(g):
            g_mat = g.transpose(1, 0, 2, 3).reshape(c_out, b_n * h * wd)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw_active = (g_mat @ cols.T).reshape(c_out, len(taps), c_in)
                gw = np.zeros_like(w.data)
                for idx, (di, dj) in enumerate(taps):
                    gw[:, :, di, dj] = gw_active[:, idx, :]
                w.accumulate_grad(gw)
            if x.requires_grad:
                g_cols = wmat.T @ g_mat
                g_patches = g_cols.reshape(len(taps), c_in, b_n, h, wd).transpose(0, 2, 1, 3, 4)
                gxp = np.zeros_like(xp)
                for idx, (di, dj) in enumerate(taps):
                    gxp[:, :, di:di + h, dj:dj + wd] += g_patches[idx]
                x.accumulate_grad(gxp[:, :, p_h:p_h + h, p_w:p_w + wd])
        _record(out, backward_fn)
    return out


def avg_pool2d(x, factors: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling by (fh, fw); dims must divide."""
    x = as_tensor(x)
    f_h, f_w = factors
    b_n, c, h, w = x.shape
    if h % f_h or w % f_w:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by pool factors {(f_h, f_w)}")
    blocks = x.data.reshape(b_n, c, h // f_h, f_h, w // f_w, f_w)
    out, track = _make_output(blocks.mean(axis=(3, 5)), x)
    if track:
        inv = 1.0 / (f_h * f_w)
        def backward_fn(g):
            gx = np.repeat(np.repeat(g, f_h, axis=2), f_w, axis=3) * inv
            x.accumulate_grad(gx)
        _record(out, backward_fn)
    return out


def upsample_nearest(x, factors: tuple[int, int]) -> Tensor:
    """Nearest-neighbour upsampling by (fh, fw)."""
    x = as_tensor(x)
    f_h, f_w = factors
    data = np.repeat(np.repeat(x.data, f_h, axis=2), f_w, axis=3)
    out, track = _make_output(data, x)
    if track:
        b_n, c, h, w = x.shape
        def backward_fn(g):
            gx = g.reshape(b_n, c, h, f_h, w, f_w).sum(axis=(3, 5))
            x.accumulate_grad(gx)
        _record(out, backward_fn)
    return out


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis (axis 1)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat expects 4-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat shapes incompatible: {a.shape} vs {b.shape}")
    out, track = _make_output(np.concatenate([a.data, b.data], axis=1), a, b)
    if track:
        c_a = a.shape[1]
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g[:, :c_a])
            if b.requires_grad:
                b.accumulate_grad(g[:, c_a:])
        _record(out, backward_fn)
    return out
