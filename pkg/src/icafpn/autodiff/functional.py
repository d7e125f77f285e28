"""Spatial ops on rank-4 feature maps: convolution, pooling, resampling."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, make, reshape


def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected (n, c, h, w), got shape {x.shape}")


def conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _patches(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dil: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dil : i * dil + hs : stride, j * dil : j * dil + ws : stride]
    return cols


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation. ``w`` has shape (c_out, c_in / groups, kh, kw)."""
    _check4(x, "conv2d")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride={stride} dilation={dilation} pad={pad}")
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    if c % groups or co % groups or cig * groups != c:
        raise DimensionError(
            f"conv2d: input has {c} channels but kernel {w.shape} with groups={groups} expects {cig * groups}"
        )
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(wd, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd}")

    if kh == kw == 1 and stride == 1 and pad == 0 and groups == 1:
        return _conv1x1(x, w, b)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _patches(xp, kh, kw, ho, wo, stride, dilation)
    k = cig * kh * kw
    cols_g = cols.reshape(n, groups, k, ho * wo)
    w_g = w.data.reshape(groups, co // groups, k)
    out = np.matmul(w_g, cols_g).reshape(n, co, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)

    def bw(g):
        g_g = g.reshape(n, groups, co // groups, ho * wo)
        gw = np.matmul(g_g, np.swapaxes(cols_g, -1, -2)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(np.swapaxes(w_g, -1, -2), g_g).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i * dilation : i * dilation + hs : stride, j * dilation : j * dilation + ws : stride] += gcols[
                    :, :, i, j
                ]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, bw, "conv2d")


def _conv1x1(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    n, c, h, wd = x.shape
    co = w.shape[0]
    wm = w.data.reshape(co, c)
    xm = x.data.reshape(n, c, h * wd)
    out = np.matmul(wm, xm).reshape(n, co, h, wd)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)

    def bw(g):
        gm = g.reshape(n, co, h * wd)
        gx = np.matmul(wm.T, gm).reshape(x.shape)
        gw = np.einsum("nop,ncp->oc", gm, xm).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, bw, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel linear map over channels; ``w`` is (c_out, c_in)."""
    _check4(x, "linear")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: weight {w.shape} does not accept {x.shape[1]} channels")
    return _conv1x1(x, _as_kernel(w), b)


def _as_kernel(w: Tensor) -> Tensor:
    return reshape(w, (w.shape[0], w.shape[1], 1, 1))


def transpose_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution without padding; ``w`` is (c_in, c_out, k, k).

    Output size per axis is (size - 1) * stride + k.
    """
    _check4(x, "transpose_conv2d")
    if stride < 1:
        raise ValueError(f"transpose_conv2d: stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"transpose_conv2d: kernel {w.shape} expects {ci} channels, input has {c}")
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    xm = x.data.reshape(n, c, h * wd)
    # (kh, kw, co, ci) @ (n, 1, 1, ci, hw) -> (n, kh, kw, co, hw)
    wt = np.transpose(w.data, (2, 3, 1, 0))
    contrib = np.matmul(wt[None], xm[:, None, None]).reshape(n, kh, kw, co, h, wd)
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    hs, ws = stride * (h - 1) + 1, stride * (wd - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += contrib[:, i, j]
    if b is not None:
        out += b.data.reshape(1, co, 1, 1)

    def bw(g):
        gc = np.empty((n, kh, kw, co, h * wd), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gc[:, i, j] = g[:, :, i : i + hs : stride, j : j + ws : stride].reshape(n, co, h * wd)
        # dx[n, ci, p] = sum_{ij,co} w[ci, co, i, j] gc[n, i, j, co, p]
        gx = np.einsum("abij,nijbp->nap", w.data, gc, optimize=True).reshape(x.shape)
        gw = np.einsum("nap,nijbp->abij", xm, gc, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, bw, "transpose_conv2d")


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    _check4(x, "avg_pool2d")
    if factor < 1:
        raise ValueError(f"avg_pool2d: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: spatial size {h}x{w} not divisible by {factor}")
    if factor == 1:
        return make(x.data.copy(), (x,), lambda g: (g,), "avg_pool2d")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def bw(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * scale, (n, c, ho, factor, wo, factor))
        return (gx.reshape(n, c, h, w).astype(x.dtype),)

    return make(out, (x,), bw, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make(out, (x,), bw, "upsample_nearest")


def unfold_neighbors(x: Tensor, kernel: int, dilation: int) -> tuple[Tensor, np.ndarray]:
    """Gather each pixel's kernel x kernel neighbourhood at the given dilation.

    Returns ``(neigh, valid)`` with ``neigh`` of shape (n, c, kernel**2, h, w)
    (out-of-bounds neighbours are zero) and ``valid`` a boolean (kernel**2, h, w)
    mask marking in-bounds neighbours.
    """
    _check4(x, "unfold_neighbors")
    n, c, h, w = x.shape
    r = kernel // 2
    p = r * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    k2 = kernel * kernel
    out = np.empty((n, c, k2, h, w), dtype=x.dtype)
    valid = np.zeros((k2, h, w), dtype=bool)
    offsets = [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]
    rows, cols = np.arange(h), np.arange(w)
    for k, (di, dj) in enumerate(offsets):
        oi, oj = p + di * dilation, p + dj * dilation
        out[:, :, k] = xp[:, :, oi : oi + h, oj : oj + w]
        vr = (rows + di * dilation >= 0) & (rows + di * dilation < h)
        vc = (cols + dj * dilation >= 0) & (cols + dj * dilation < w)
        valid[k] = vr[:, None] & vc[None, :]

    def bw(g):
        gxp = np.zeros_like(xp)
        for k, (di, dj) in enumerate(offsets):
            oi, oj = p + di * dilation, p + dj * dilation
            gxp[:, :, oi : oi + h, oj : oj + w] += g[:, :, k]
        return (gxp[:, :, p : p + h, p : p + w],)

    return make(out, (x,), bw, "unfold_neighbors"), valid
