"""Convolutional additive self-attention (CASA) and a softmax-attention oracle.

A feature map ``x`` of shape (B, C, H, W) is read as N = H*W tokens of
dimension d = C. The unit computes

    Q, K, V = Wq x, Wk x, Wv x                  (pointwise convolutions)
    phi(z)  = channel_gate(spatial_gate(z))     (shared between Q and K)
    O       = Gamma(phi(Q) + phi(K)) * V

where ``*`` is an elementwise product. A matrix product with V would bring
back the N x N cost that the additive similarity is meant to avoid, so the
elementwise reading is the one implemented.

spatial_gate(z) = z * sigmoid(depthwise3x3(z))
channel_gate(z) = z * sigmoid(W_c avgpool(z) + b_c)   (no bottleneck)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SPATIAL_KERNEL = 3


@dataclass
class CasaParams:
    w_q: Tensor  # (C, C, 1, 1)
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    spatial_kernel: Tensor  # (C, 1, 3, 3) depthwise
    spatial_bias: Tensor
    channel_gate: Tensor  # (C, C) acting on pooled channels
    channel_bias: Tensor
    gamma: Tensor  # (C, C, 1, 1)
    gamma_bias: Tensor

    @property
    def channels(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, channels, rng):
        """Fan-in scaled uniform weights, zero biases."""
        C = channels

        def u(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        def z():
            return Tensor(np.zeros(C), requires_grad=True)

        k = SPATIAL_KERNEL
        return cls(
            w_q=u((C, C, 1, 1), C), b_q=z(),
            w_k=u((C, C, 1, 1), C), b_k=z(),
            w_v=u((C, C, 1, 1), C), b_v=z(),
            spatial_kernel=u((C, 1, k, k), k * k), spatial_bias=z(),
            channel_gate=u((C, C), C), channel_bias=z(),
            gamma=u((C, C, 1, 1), C), gamma_bias=z(),
        )

    def parameters(self):
        return [t for _, t in T.named_tensors(self)]

    def num_parameters(self):
        return int(np.sum([t.size for t in self.parameters()]))


def casa_param_count(channels):
    """Parameter count as a function of C alone (no spatial dependence)."""
    C = channels
    return 4 * (C * C + C) + C * SPATIAL_KERNEL**2 + C + C * C + C


def _check_input(x, p):
    if x.ndim != 4:
        raise ShapeError(f"CASA expects (B,C,H,W), got {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"CASA: input channels (axis 1) = {x.shape[1]}, params built for {p.channels}")


def project_qkv(x, p):
    _check_input(x, p)
    q = T.conv2d(x, p.w_q, p.b_q)
    k = T.conv2d(x, p.w_k, p.b_k)
    v = T.conv2d(x, p.w_v, p.b_v)
    return q, k, v


def spatial_attention(x, p):
    pre = T.conv2d(x, p.spatial_kernel, p.spatial_bias, padding=SPATIAL_KERNEL // 2, groups=x.shape[1])
    return T.mul(x, T.sigmoid(pre))


def channel_gates(x, p):
    """Per-channel gate values, shape (B, C)."""
    return T.sigmoid(T.linear(T.global_avg_pool(x), p.channel_gate, p.channel_bias))


def channel_attention(x, p):
    B, C = x.shape[:2]
    return T.mul(x, T.reshape(channel_gates(x, p), (B, C, 1, 1)))


def context_map(x, p):
    """phi(x) = channel_attention(spatial_attention(x))."""
    return channel_attention(spatial_attention(x, p), p)


def casa_forward(x, p):
    q, k, v = project_qkv(x, p)
    similarity = T.add(context_map(q, p), context_map(k, p))
    return T.mul(T.conv2d(similarity, p.gamma, p.gamma_bias), v)


# ---------------------------------------------------------------------------
# oracle and complexity model


def softmax_attention(q, k, v, chunk=1024):
    """softmax(Q K^T / sqrt(d)) V for (N, d) inputs.

    Records a differentiable graph when gradients are needed; otherwise runs
    row-chunked in numpy so that large N does not materialise N x N at once.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.ndim != 2 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"softmax_attention expects matching (N,d) inputs, got {q.shape}, {k.shape}, {v.shape}")
    N, d = q.shape
    scale = 1.0 / math.sqrt(d)
    if T.is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad):
        scores = T.scale(T.matmul(q, T.transpose(k)), scale)
        return T.matmul(T.softmax(scores, axis=1), v)
    qd, kd, vd = q.data, k.data, v.data
    out = np.empty((N, d))
    for start in range(0, N, chunk):
        s = (qd[start : start + chunk] @ kd.T) * scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[start : start + chunk] = s @ vd
    n_rows = N
    T._count("matmul", 2 * n_rows * N * d)
    T._count("scale", N * N)
    T._count("softmax", 4 * N * N)
    return Tensor(out)


def flop_count(kind, n_tokens, dim):
    """Analytic elementary-op count of one forward pass at batch size 1.

    Uses the same conventions as :class:`mecasa.tensor.FlopCounter`.
    casa:    4*N*d^2 + (16 + 2*k^2)*N*d + 2*d^2 + 4*d      (k = 3)
    softmax: 2*N^2*d + 5*N^2
    """
    N, d = int(n_tokens), int(dim)
    if N < 1 or d < 1:
        raise ValueError("n_tokens and dim must be >= 1")
    if kind == "casa":
        k2 = SPATIAL_KERNEL**2
        projections = 3 * (N * d * d + N * d)
        spatial = k2 * N * d + N * d + N * d + N * d  # dwconv, bias, sigmoid, gate mul
        channel = N * d + (d * d + d) + d + N * d  # pool, linear+bias, sigmoid, gate mul
        mix = N * d + (N * d * d + N * d) + N * d  # add, gamma+bias, product with V
        return projections + 2 * (spatial + channel) + mix
    if kind == "softmax":
        return 2 * N * N * d + N * N + 4 * N * N
    raise ValueError(f"unknown attention kind {kind!r}")


def crossover_tokens(dim):
    """Smallest N for which softmax attention costs more than CASA."""
    d = dim
    # 2d+5 N^2 > (4d^2 + (16+2k^2) d) N + 2d^2 + 4d  -> positive root of a quadratic
    a = 2 * d + 5
    b = -(4 * d * d + (16 + 2 * SPATIAL_KERNEL**2) * d)
    c = -(2 * d * d + 4 * d)
    root = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    n = max(1, math.floor(root))
    while flop_count("softmax", n, d) <= flop_count("casa", n, d):
        n += 1
    return n
