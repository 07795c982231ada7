"""Pure numpy convolution kernels; same contracts as the compiled module."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (C*kh*kw, B*Ho*Wo)."""
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    win = sliding_window_view(_pad(x, pad), (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (C, kh, kw, B, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)


def col2im(cols, B, C, H, W, kh, kw, stride, pad):
    """(C*kh*kw, B*Ho*Wo) -> (B, C, H, W), summing overlapping taps."""
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    cols = cols.reshape(C, kh, kw, B, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def dw_forward(x, w, stride, pad):
    B, C, H, W = x.shape
    _, kh, kw = w.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((B, C, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            out += w[None, :, i, j, None, None] * sl
    return out


def dw_backward_input(gy, w, H, W, stride, pad):
    B, C, Ho, Wo = gy.shape
    _, kh, kw = w.shape
    gx = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                w[None, :, i, j, None, None] * gy
            )
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx)


def dw_backward_weight(gy, x, kh, kw, stride, pad):
    B, C, Ho, Wo = gy.shape
    xp = _pad(x, pad)
    gw = np.empty((C, kh, kw))
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            gw[:, i, j] = np.einsum("bchw,bchw->c", gy, sl)
    return gw
