"""Convolution kernels with a compiled core and a numpy fallback.

The compiled Cython module is used when it imports; otherwise the numpy
implementation is selected. ``MECASA_KERNELS=python`` forces the fallback.
Dense convolutions go through im2col + BLAS matmul; depthwise convolutions
use direct loops. Only the loop-heavy primitives live in the backends.
"""
import os
import warnings

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def _default_backend():
    requested = os.environ.get("MECASA_KERNELS", "").strip().lower()
    if requested:
        if requested in _BACKENDS:
            return requested
        warnings.warn(f"MECASA_KERNELS={requested!r} unavailable; using default")
    return "compiled" if "compiled" in _BACKENDS else "python"


_active = _default_backend()


def get_backend():
    return _active


def set_backend(name):
    """Switch kernel backend; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    prev, _active = _active, name
    return prev


def _impl():
    return _BACKENDS[_active]


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, stride, pad, groups):
    """Returns ``(y, ctx)``; ``ctx`` is handed back to :func:`conv2d_backward`."""
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    Ho, Wo = out_size(H, kh, stride, pad), out_size(W, kw, stride, pad)
    if groups == 1:
        wm = w.reshape(Cout, Cg * kh * kw)
        if kh == kw == 1 and stride == 1 and pad == 0:
            y = np.matmul(wm, x.reshape(B, C, H * W))
            return y.reshape(B, Cout, Ho, Wo), None
        cols = _impl().im2col(x, kh, kw, stride, pad)
        y = (wm @ cols).reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y), cols
    if Cg == 1 and Cout == C:
        return _impl().dw_forward(x, np.ascontiguousarray(w.reshape(C, kh, kw)), stride, pad), None
    og = Cout // groups
    parts, ctxs = [], []
    for g in range(groups):
        xg = np.ascontiguousarray(x[:, g * Cg : (g + 1) * Cg])
        yg, cg = conv2d_forward(xg, np.ascontiguousarray(w[g * og : (g + 1) * og]), stride, pad, 1)
        parts.append(yg)
        ctxs.append(cg)
    return np.concatenate(parts, axis=1), ctxs


def conv2d_backward(gy, x, w, stride, pad, groups, ctx=None, need_x=True, need_w=True):
    """Gradients w.r.t. input and weight (``None`` where not requested)."""
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    gy = np.ascontiguousarray(gy)
    gx = gw = None
    if groups == 1:
        wm = w.reshape(Cout, Cg * kh * kw)
        g2 = gy.reshape(B, Cout, -1)
        if kh == kw == 1 and stride == 1 and pad == 0:
            if need_x:
                gx = np.matmul(wm.T, g2).reshape(x.shape)
            if need_w:
                gw = np.matmul(g2, x.reshape(B, C, H * W).transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            return gx, gw
        cols = ctx if ctx is not None else _impl().im2col(x, kh, kw, stride, pad)
        gmat = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(Cout, -1)
        if need_x:
            gx = _impl().col2im(wm.T @ gmat, B, C, H, W, kh, kw, stride, pad)
        if need_w:
            gw = (gmat @ cols.T).reshape(w.shape)
        return gx, gw
    if Cg == 1 and Cout == C:
        w3 = np.ascontiguousarray(w.reshape(C, kh, kw))
        if need_x:
            gx = _impl().dw_backward_input(gy, w3, H, W, stride, pad)
        if need_w:
            gw = _impl().dw_backward_weight(gy, x, kh, kw, stride, pad).reshape(w.shape)
        return gx, gw
    og = Cout // groups
    gxs, gws = [], []
    for g in range(groups):
        xg = np.ascontiguousarray(x[:, g * Cg : (g + 1) * Cg])
        wg = np.ascontiguousarray(w[g * og : (g + 1) * og])
        a, b = conv2d_backward(
            gy[:, g * og : (g + 1) * og], xg, wg, stride, pad, 1,
            ctx[g] if ctx is not None else None, need_x, need_w,
        )
        gxs.append(a)
        gws.append(b)
    if need_x:
        gx = np.concatenate(gxs, axis=1)
    if need_w:
        gw = np.concatenate(gws, axis=0)
    return gx, gw
