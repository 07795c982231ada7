# cython: language_level=3
"""Compiled convolution kernels (float64, C-contiguous NCHW).

Mirrors ``_pykernels`` function for function. Each kernel walks kernel taps
in the outer loops and computes the valid output range per tap up front, so
the innermost loop is a branch-free strided accumulate.
"""
import numpy as np


cdef inline Py_ssize_t _first(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest o >= 0 with o*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _stop(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t n,
                             Py_ssize_t n_out) noexcept nogil:
    # one past the largest o < n_out with o*stride + off <= n - 1
    cdef Py_ssize_t last
    if n - 1 - off < 0:
        return 0
    last = (n - 1 - off) // stride + 1
    return last if last < n_out else n_out


def _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    """(B, C, H, W) -> (C*kh*kw, B*Ho*Wo)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, pad)
    cdef Py_ssize_t P = Ho * Wo
    out = np.zeros((C * kh * kw, B * P), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, c, i, j, oh, ow, row, col, ih, offw, h0, h1, w0, w1
    with nogil:
        for c in range(C):
            for i in range(kh):
                h0 = _first(i - pad, stride)
                h1 = _stop(i - pad, stride, H, Ho)
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    offw = j - pad
                    w0 = _first(offw, stride)
                    w1 = _stop(offw, stride, W, Wo)
                    for b in range(B):
                        for oh in range(h0, h1):
                            ih = oh * stride + i - pad
                            col = b * P + oh * Wo
                            for ow in range(w0, w1):
                                o[row, col + ow] = x[b, c, ih, ow * stride + offw]
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    """(C*kh*kw, B*Ho*Wo) -> (B, C, H, W), summing overlapping taps."""
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, pad)
    cdef Py_ssize_t P = Ho * Wo
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] g = out
    cdef Py_ssize_t b, c, i, j, oh, ow, row, col, ih, offw, h0, h1, w0, w1
    with nogil:
        for c in range(C):
            for i in range(kh):
                h0 = _first(i - pad, stride)
                h1 = _stop(i - pad, stride, H, Ho)
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    offw = j - pad
                    w0 = _first(offw, stride)
                    w1 = _stop(offw, stride, W, Wo)
                    for b in range(B):
                        for oh in range(h0, h1):
                            ih = oh * stride + i - pad
                            col = b * P + oh * Wo
                            for ow in range(w0, w1):
                                g[b, c, ih, ow * stride + offw] += cols[row, col + ow]
    return out


cdef inline void _axpy_strided(double* dst, const double* src, double a, Py_ssize_t n,
                               Py_ssize_t step) noexcept nogil:
    # dst[k] += a * src[k*step]
    cdef Py_ssize_t k
    if step == 1:
        for k in range(n):
            dst[k] += a * src[k]
    else:
        for k in range(n):
            dst[k] += a * src[k * step]


cdef inline void _scatter_strided(double* dst, const double* src, double a, Py_ssize_t n,
                                  Py_ssize_t step) noexcept nogil:
    # dst[k*step] += a * src[k]
    cdef Py_ssize_t k
    if step == 1:
        for k in range(n):
            dst[k] += a * src[k]
    else:
        for k in range(n):
            dst[k * step] += a * src[k]


cdef inline double _dot_strided(const double* a, const double* b, Py_ssize_t n,
                                Py_ssize_t step) noexcept nogil:
    # sum a[k] * b[k*step]
    cdef Py_ssize_t k
    cdef double acc = 0.0
    if step == 1:
        for k in range(n):
            acc += a[k] * b[k]
    else:
        for k in range(n):
            acc += a[k] * b[k * step]
    return acc


cdef void _pad_plane(const double* src, double* dst, Py_ssize_t H, Py_ssize_t W) noexcept nogil:
    # copy an H x W plane into the interior of a zeroed (H+2) x (W+2) buffer
    cdef Py_ssize_t r, k
    for r in range(H):
        for k in range(W):
            dst[(r + 1) * (W + 2) + k + 1] = src[r * W + k]


cdef void _dw3_plane(const double* xp, double* y, const double* w, Py_ssize_t H,
                     Py_ssize_t W) noexcept nogil:
    # 3x3, stride 1 over a padded plane; all taps summed in registers
    cdef Py_ssize_t r, k, Wp = W + 2
    cdef const double* a
    cdef const double* b
    cdef const double* c
    cdef double* out
    for r in range(H):
        a = xp + r * Wp
        b = a + Wp
        c = b + Wp
        out = y + r * W
        for k in range(W):
            out[k] = (w[0] * a[k] + w[1] * a[k + 1] + w[2] * a[k + 2]
                      + w[3] * b[k] + w[4] * b[k + 1] + w[5] * b[k + 2]
                      + w[6] * c[k] + w[7] * c[k + 1] + w[8] * c[k + 2])


def _dw3_same(const double[:, :, :, ::1] x, const double[:, :, ::1] w, bint flip):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out = np.empty((B, C, H, W), dtype=np.float64)
    pad = np.zeros((H + 2) * (W + 2), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef double[::1] xp = pad
    cdef double taps[9]
    cdef Py_ssize_t b, c, t
    with nogil:
        for c in range(C):
            for t in range(9):
                taps[t] = w[c, (8 - t) // 3, (8 - t) % 3] if flip else w[c, t // 3, t % 3]
            for b in range(B):
                _pad_plane(&x[b, c, 0, 0], &xp[0], H, W)
                _dw3_plane(&xp[0], &y[b, c, 0, 0], taps, H, W)
    return out


def _dw3_same_weight(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Wp = W + 2
    out = np.zeros((C, 3, 3), dtype=np.float64)
    pad = np.zeros((H + 2) * (W + 2), dtype=np.float64)
    cdef double[:, :, ::1] gw = out
    cdef double[::1] xpv = pad
    cdef double acc[9]
    cdef const double* a
    cdef const double* bb
    cdef const double* cc
    cdef const double* g
    cdef double gv
    cdef Py_ssize_t b, c, r, k, t
    with nogil:
        for c in range(C):
            for t in range(9):
                acc[t] = 0.0
            for b in range(B):
                _pad_plane(&x[b, c, 0, 0], &xpv[0], H, W)
                for r in range(H):
                    a = &xpv[r * Wp]
                    bb = a + Wp
                    cc = bb + Wp
                    g = &gy[b, c, r, 0]
                    for k in range(W):
                        gv = g[k]
                        acc[0] += gv * a[k]
                        acc[1] += gv * a[k + 1]
                        acc[2] += gv * a[k + 2]
                        acc[3] += gv * bb[k]
                        acc[4] += gv * bb[k + 1]
                        acc[5] += gv * bb[k + 2]
                        acc[6] += gv * cc[k]
                        acc[7] += gv * cc[k + 1]
                        acc[8] += gv * cc[k + 2]
            for t in range(9):
                gw[c, t // 3, t % 3] = acc[t]
    return out


def dw_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] w,
               Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, pad)
    if kh == 3 and kw == 3 and stride == 1 and pad == 1:
        return _dw3_same(x, w, False)
    out = np.zeros((B, C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, c, i, j, oh, ih, offw, h0, h1, w0, w1
    cdef double wt
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    h0 = _first(i - pad, stride)
                    h1 = _stop(i - pad, stride, H, Ho)
                    for j in range(kw):
                        wt = w[c, i, j]
                        offw = j - pad
                        w0 = _first(offw, stride)
                        w1 = _stop(offw, stride, W, Wo)
                        if w1 <= w0:
                            continue
                        for oh in range(h0, h1):
                            ih = oh * stride + i - pad
                            _axpy_strided(&y[b, c, oh, w0], &x[b, c, ih, w0 * stride + offw],
                                          wt, w1 - w0, stride)
    return out


def dw_backward_input(const double[:, :, :, ::1] gy, const double[:, :, ::1] w,
                      Py_ssize_t H, Py_ssize_t W, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    if kh == 3 and kw == 3 and stride == 1 and pad == 1:
        return _dw3_same(gy, w, True)
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, c, i, j, oh, ih, offw, h0, h1, w0, w1
    cdef double wt
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    h0 = _first(i - pad, stride)
                    h1 = _stop(i - pad, stride, H, Ho)
                    for j in range(kw):
                        wt = w[c, i, j]
                        offw = j - pad
                        w0 = _first(offw, stride)
                        w1 = _stop(offw, stride, W, Wo)
                        if w1 <= w0:
                            continue
                        for oh in range(h0, h1):
                            ih = oh * stride + i - pad
                            _scatter_strided(&gx[b, c, ih, w0 * stride + offw], &gy[b, c, oh, w0],
                                             wt, w1 - w0, stride)
    return out


def dw_backward_weight(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] x,
                       Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    if kh == 3 and kw == 3 and stride == 1 and pad == 1:
        return _dw3_same_weight(gy, x)
    out = np.zeros((C, kh, kw), dtype=np.float64)
    cdef double[:, :, ::1] gw = out
    cdef Py_ssize_t b, c, i, j, oh, ih, offw, h0, h1, w0, w1
    cdef double acc
    with nogil:
        for c in range(C):
            for i in range(kh):
                h0 = _first(i - pad, stride)
                h1 = _stop(i - pad, stride, H, Ho)
                for j in range(kw):
                    offw = j - pad
                    w0 = _first(offw, stride)
                    w1 = _stop(offw, stride, W, Wo)
                    acc = 0.0
                    if w1 > w0:
                        for b in range(B):
                            for oh in range(h0, h1):
                                ih = oh * stride + i - pad
                                acc += _dot_strided(&gy[b, c, oh, w0], &x[b, c, ih, w0 * stride + offw],
                                                    w1 - w0, stride)
                    gw[c, i, j] = acc
    return out
