"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names at the bottom are bound to one path according to
``accel.USE_NUMBA``; the ``*_nb`` / ``*_np`` variants stay importable so the
two paths can be compared against each other.

Conventions: images are float64 ``(H, W)`` arrays; feature tensors are
float64 ``(N, C, H, W)``; convolution kernels are ``(O, C // groups, kh, kw)``
and run as unpadded cross-correlation (callers pad).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .accel import njit, pick

# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _axis_scale(n_in, n_out):
    # corner-aligned: first and last samples hit the first and last pixels
    if n_out <= 1 or n_in <= 1:
        return 0.0
    return (n_in - 1) / (n_out - 1)


@njit
def _resize_nb(src, out_h, out_w, sy_scale, sx_scale):
    h, w = src.shape
    out = np.empty((out_h, out_w), dtype=np.float64)
    for y in range(out_h):
        sy = y * sy_scale
        y0 = int(np.floor(sy))
        if y0 > h - 1:
            y0 = h - 1
        y1 = y0 + 1 if y0 < h - 1 else y0
        wy = sy - y0
        for x in range(out_w):
            sx = x * sx_scale
            x0 = int(np.floor(sx))
            if x0 > w - 1:
                x0 = w - 1
            x1 = x0 + 1 if x0 < w - 1 else x0
            wx = sx - x0
            top = src[y0, x0] + (src[y0, x1] - src[y0, x0]) * wx
            bot = src[y1, x0] + (src[y1, x1] - src[y1, x0]) * wx
            out[y, x] = top + (bot - top) * wy
    return out


def _resize_np(src, out_h, out_w, sy_scale, sx_scale):
    h, w = src.shape
    sy = np.arange(out_h) * sy_scale
    sx = np.arange(out_w) * sx_scale
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 1)
    y1 = np.where(y0 < h - 1, y0 + 1, y0)
    x1 = np.where(x0 < w - 1, x0 + 1, x0)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    a = src[y0[:, None], x0[None, :]]
    b = src[y0[:, None], x1[None, :]]
    c = src[y1[:, None], x0[None, :]]
    d = src[y1[:, None], x1[None, :]]
    top = a + (b - a) * wx
    bot = c + (d - c) * wx
    return top + (bot - top) * wy


def bilinear_resize(src, out_h, out_w, *, impl=None):
    """Corner-aligned bilinear resize of a float image (no rounding)."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    fn = impl or resize_impl
    return fn(src, int(out_h), int(out_w),
              _axis_scale(src.shape[0], out_h), _axis_scale(src.shape[1], out_w))


@njit
def _warp_nb(src, inv, out_h, out_w):
    h, w = src.shape
    yc = (h - 1) / 2.0
    xc = (w - 1) / 2.0
    out = np.empty((out_h, out_w), dtype=np.float64)
    for y in range(out_h):
        cy = y - yc
        for x in range(out_w):
            cx = x - xc
            sx = inv[0, 0] * cx + inv[0, 1] * cy + inv[0, 2] + xc
            sy = inv[1, 0] * cx + inv[1, 1] * cy + inv[1, 2] + yc
            # nearest-edge fill
            if sx < 0.0:
                sx = 0.0
            elif sx > w - 1:
                sx = w - 1.0
            if sy < 0.0:
                sy = 0.0
            elif sy > h - 1:
                sy = h - 1.0
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = x0 + 1 if x0 < w - 1 else x0
            y1 = y0 + 1 if y0 < h - 1 else y0
            wx = sx - x0
            wy = sy - y0
            top = src[y0, x0] + (src[y0, x1] - src[y0, x0]) * wx
            bot = src[y1, x0] + (src[y1, x1] - src[y1, x0]) * wx
            out[y, x] = top + (bot - top) * wy
    return out


def _warp_np(src, inv, out_h, out_w):
    h, w = src.shape
    yc = (h - 1) / 2.0
    xc = (w - 1) / 2.0
    cy = (np.arange(out_h) - yc)[:, None]
    cx = (np.arange(out_w) - xc)[None, :]
    sx = inv[0, 0] * cx + inv[0, 1] * cy + inv[0, 2] + xc
    sy = inv[1, 0] * cx + inv[1, 1] * cy + inv[1, 2] + yc
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.where(x0 < w - 1, x0 + 1, x0)
    y1 = np.where(y0 < h - 1, y0 + 1, y0)
    wx = sx - x0
    wy = sy - y0
    top = src[y0, x0] + (src[y0, x1] - src[y0, x0]) * wx
    bot = src[y1, x0] + (src[y1, x1] - src[y1, x0]) * wx
    return top + (bot - top) * wy


def affine_warp(src, inv, out_h=None, out_w=None, *, impl=None):
    """Inverse-mapped bilinear warp about the image centre.

    ``inv`` is the 2x3 matrix taking centred output coordinates ``(x, y)``
    to centred source coordinates; reads outside the source clamp to the edge.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    inv = np.ascontiguousarray(inv, dtype=np.float64)
    out_h = src.shape[0] if out_h is None else int(out_h)
    out_w = src.shape[1] if out_w is None else int(out_w)
    fn = impl or warp_impl
    return fn(src, inv, out_h, out_w)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@njit
def _conv_fwd_nb(x, w, b, stride, groups):
    n_b, _, h, wd = x.shape
    n_o, cg, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    og = n_o // groups
    out = np.empty((n_b, n_o, ho, wo), dtype=np.float64)
    for n in range(n_b):
        for o in range(n_o):
            c_base = (o // og) * cg
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cg):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[n, c_base + c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


@njit
def _conv_bwd_nb(x, w, dout, stride, groups):
    n_b, _, h, wd = x.shape
    n_o, cg, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    og = n_o // groups
    dx = np.zeros(x.shape, dtype=np.float64)
    dw = np.zeros(w.shape, dtype=np.float64)
    db = np.zeros(n_o, dtype=np.float64)
    for n in range(n_b):
        for o in range(n_o):
            c_base = (o // og) * cg
            for i in range(ho):
                for j in range(wo):
                    g = dout[n, o, i, j]
                    db[o] += g
                    if g == 0.0:
                        continue
                    for c in range(cg):
                        for p in range(kh):
                            for q in range(kw):
                                r = i * stride + p
                                s = j * stride + q
                                dw[o, c, p, q] += g * x[n, c_base + c, r, s]
                                dx[n, c_base + c, r, s] += g * w[o, c, p, q]
    return dx, dw, db


def _windows(x, kh, kw, stride, groups):
    n_b, n_c, _, _ = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, G, Cg, Ho, Wo, kh, kw)
    return win.reshape(n_b, groups, n_c // groups, *win.shape[2:])


def _conv_fwd_np(x, w, b, stride, groups):
    n_o, cg, kh, kw = w.shape
    win = _windows(x, kh, kw, stride, groups)
    wg = w.reshape(groups, n_o // groups, cg, kh, kw)
    out = np.einsum("ngcHWij,gocij->ngoHW", win, wg, optimize=True)
    out = out.reshape(x.shape[0], n_o, *out.shape[3:])
    return out + b[None, :, None, None]


def _conv_bwd_np(x, w, dout, stride, groups):
    n_b = x.shape[0]
    n_o, cg, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    og = n_o // groups
    win = _windows(x, kh, kw, stride, groups)
    dg = dout.reshape(n_b, groups, og, ho, wo)
    wg = w.reshape(groups, og, cg, kh, kw)
    dw = np.einsum("ngcHWij,ngoHW->gocij", win, dg, optimize=True).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros((n_b, groups, cg) + x.shape[2:], dtype=np.float64)
    for p in range(kh):
        for q in range(kw):
            contrib = np.einsum("ngoHW,goc->ngcHW", dg, wg[..., p, q], optimize=True)
            dx[:, :, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += contrib
    return dx.reshape(x.shape), dw, db


def conv_forward(x, w, b, stride=1, groups=1, *, impl=None):
    fn = impl or conv_fwd_impl
    return fn(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
              np.ascontiguousarray(b, dtype=np.float64), int(stride), int(groups))


def conv_backward(x, w, dout, stride=1, groups=1, *, impl=None):
    """Return ``(dx, dw, db)`` for an unpadded strided grouped cross-correlation."""
    fn = impl or conv_bwd_impl
    return fn(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
              np.ascontiguousarray(dout, dtype=np.float64), int(stride), int(groups))


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


@njit
def _pool_fwd_nb(x, r, h):
    n_b, n_c, hh, ww = x.shape
    ho = (hh - r) // h + 1
    wo = (ww - r) // h + 1
    out = np.empty((n_b, n_c, ho, wo), dtype=np.float64)
    arg = np.empty((n_b, n_c, ho, wo), dtype=np.int64)
    for n in range(n_b):
        for c in range(n_c):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, c, i * h, j * h]
                    best_k = 0
                    for p in range(r):
                        for q in range(r):
                            v = x[n, c, i * h + p, j * h + q]
                            if v > best:
                                best = v
                                best_k = p * r + q
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = best_k
    return out, arg


@njit
def _pool_bwd_nb(dout, arg, r, h, in_h, in_w):
    n_b, n_c, ho, wo = dout.shape
    dx = np.zeros((n_b, n_c, in_h, in_w), dtype=np.float64)
    for n in range(n_b):
        for c in range(n_c):
            for i in range(ho):
                for j in range(wo):
                    k = arg[n, c, i, j]
                    dx[n, c, i * h + k // r, j * h + k % r] += dout[n, c, i, j]
    return dx


def _pool_fwd_np(x, r, h):
    win = sliding_window_view(x, (r, r), axis=(2, 3))[:, :, ::h, ::h]
    flat = win.reshape(*win.shape[:4], r * r)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def _pool_bwd_np(dout, arg, r, h, in_h, in_w):
    n_b, n_c, ho, wo = dout.shape
    rows = np.arange(ho)[:, None] * h + arg // r
    cols = np.arange(wo)[None, :] * h + arg % r
    dx = np.zeros((n_b, n_c, in_h, in_w), dtype=np.float64)
    nn_, cc = np.meshgrid(np.arange(n_b), np.arange(n_c), indexing="ij")
    np.add.at(dx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), dout)
    return dx


def maxpool_forward(x, r, h, *, impl=None):
    """Window maxima and the in-window argmax (row-major, first maximum wins)."""
    fn = impl or pool_fwd_impl
    return fn(np.ascontiguousarray(x, dtype=np.float64), int(r), int(h))


def maxpool_backward(dout, arg, r, h, in_shape, *, impl=None):
    fn = impl or pool_bwd_impl
    return fn(np.ascontiguousarray(dout, dtype=np.float64), np.ascontiguousarray(arg), int(r), int(h),
              int(in_shape[-2]), int(in_shape[-1]))


resize_impl = pick(_resize_nb, _resize_np)
warp_impl = pick(_warp_nb, _warp_np)
conv_fwd_impl = pick(_conv_fwd_nb, _conv_fwd_np)
conv_bwd_impl = pick(_conv_bwd_nb, _conv_bwd_np)
pool_fwd_impl = pick(_pool_fwd_nb, _pool_fwd_np)
pool_bwd_impl = pick(_pool_bwd_nb, _pool_bwd_np)

NUMBA_IMPLS = {
    "resize": _resize_nb, "warp": _warp_nb, "conv_fwd": _conv_fwd_nb,
    "conv_bwd": _conv_bwd_nb, "pool_fwd": _pool_fwd_nb, "pool_bwd": _pool_bwd_nb,
}
NUMPY_IMPLS = {
    "resize": _resize_np, "warp": _warp_np, "conv_fwd": _conv_fwd_np,
    "conv_bwd": _conv_bwd_np, "pool_fwd": _pool_fwd_np, "pool_bwd": _pool_bwd_np,
}
