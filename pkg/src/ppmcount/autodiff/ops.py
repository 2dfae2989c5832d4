"""Differentiable kernels: exactly the set the counting network needs."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, record

# Upper bound on im2col buffer size (elements); larger convolutions run in row chunks.
COL_BUDGET = 1 << 24

_SIGMOID_HI = 1.0 - 2.0 ** -53
_SIGMOID_LO = np.finfo(np.float64).tiny


def _require_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects a rank-4 (n, c, h, w) tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(c, k, k, n, oh, ow),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(c * k * k, n * oh * ow)


def _row_chunks(n: int, c: int, k: int, oh: int, ow: int):
    per_row = max(1, n * c * k * k * ow)
    rows = max(1, min(oh, COL_BUDGET // per_row))
    for r0 in range(0, oh, rows):
        yield r0, min(oh, r0 + rows)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with square kernels and zero padding.

    Output spatial size is ``(h + 2*padding - k) // stride + 1``.
    """
    _require_rank4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weights must be (out_c, in_c, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, k, _ = weight.shape
    if ic != c:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weights {weight.shape}")
    if bias.shape != (oc,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weights {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d kernel {k} too large for input {x.shape} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w2 = weight.data.reshape(oc, -1)
    chunks = list(_row_chunks(n, c, k, oh, ow))
    out = np.empty((oc, n, oh, ow))
    cached = None
    for r0, r1 in chunks:
        xs = xp[:, :, r0 * stride:(r1 - 1) * stride + k]
        cols = _im2col(xs, k, stride, r1 - r0, ow)
        out[:, :, r0:r1] = (w2 @ cols).reshape(oc, n, r1 - r0, ow)
        if len(chunks) == 1:
            cached = cols
    out = out.transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3)
        dw = np.zeros_like(w2)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for r0, r1 in chunks:
            rows = r1 - r0
            cols = cached if cached is not None else _im2col(
                xp[:, :, r0 * stride:(r1 - 1) * stride + k], k, stride, rows, ow)
            gc = np.ascontiguousarray(g2[:, :, r0:r1]).reshape(oc, -1)
            dw += gc @ cols.T
            if dxp is None:
                continue
            dcols = (w2.T @ gc).reshape(c, k, k, n, rows, ow)
            base = r0 * stride
            for i in range(k):
                for j in range(k):
                    dxp[:, :, base + i:base + i + stride * rows:stride, j:j + stride * ow:stride] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3))
        if dxp is None:
            dx = None
        elif padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return dx, dw.reshape(weight.shape), g.sum(axis=(0, 2, 3))

    return record("conv2d", (x, weight, bias), out, backward)


def max_pool_2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route gradient to the first cell in row-major order."""
    _require_rank4(x, "max_pool_2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool_2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record("max_pool_2x2", (x,), out, backward)


def adaptive_bins(size: int, k: int) -> list[tuple[int, int]]:
    """Half-open ranges ``[floor(i*size/k), ceil((i+1)*size/k))`` for i in 0..k-1."""
    return [((i * size) // k, -((-(i + 1) * size) // k)) for i in range(k)]


def adaptive_max_pool(x: Tensor, bins: int) -> Tensor:
    _require_rank4(x, "adaptive_max_pool")
    n, c, h, w = x.shape
    if bins < 1 or bins > h or bins > w:
        raise ValueError(f"adaptive_max_pool: {bins} bins do not fit a {h}x{w} map")
    rows, cols = adaptive_bins(h, bins), adaptive_bins(w, bins)
    out = np.empty((n, c, bins, bins))
    argmax = {}
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            region = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            a = region.argmax(axis=-1)
            argmax[i, j] = a
            out[:, :, i, j] = np.take_along_axis(region, a[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros((n, c, h, w))
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                a = argmax[i, j]
                bw = c1 - c0
                dx[nn, cc, r0 + a // bw, c0 + a % bw] += g[:, :, i, j]
        return (dx,)

    return record("adaptive_max_pool", (x,), out, backward)


def interp_matrix(out_size: int, size: int) -> np.ndarray:
    """Row i blends the two source cells around ``(i + 0.5) * size / out_size - 0.5`` (edge-clamped)."""
    m = np.zeros((out_size, size))
    for i in range(out_size):
        src = min(max((i + 0.5) * size / out_size - 0.5, 0.0), size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_rank4(x, "bilinear_upsample")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    ry, rx = interp_matrix(out_h, h), interp_matrix(out_w, w)
    out = ry @ (x.data @ rx.T)

    def backward(g):
        return ((ry.T @ g) @ rx,)

    return record("bilinear_upsample", (x,), out, backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    for t in tensors:
        _require_rank4(t, "concat_channels")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels shape mismatch: {tensors[0].shape} vs {t.shape}")
    edges = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(tensors)))

    return record("concat_channels", tuple(tensors), out, backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank4(x, "channel_slice")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError(f"channel range [{start}, {stop}) outside 0..{c}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return record("channel_slice", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so every output lies strictly inside (0, 1)."""
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def sum_squared_error(pred: Tensor, target) -> Tensor:
    """Sum over every element of ``(pred - target)**2``, as a scalar."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"sum_squared_error shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = np.array(np.sum(diff * diff))

    def backward(g):
        d = 2.0 * g * diff
        return d, -d

    return record("sum_squared_error", (pred, target), out, backward)


def total(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())
    return record("total", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return record("scale", (x,), x.data * factor, lambda g: (g * factor,))
