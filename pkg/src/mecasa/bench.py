"""Attention scaling and kernel-backend benchmarks."""
from __future__ import annotations

import math
import statistics
import time

import numpy as np

from . import _kernels
from . import tensor as T
from .attention import CasaParams, casa_forward, flop_count, softmax_attention
from .backbone import BackboneConfig, MecasaNet

DEFAULT_TOKENS = (256, 512, 1024, 2048, 4096, 8192)


def _median_time(fn, reps, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def token_grid(n):
    """(H, W) with H*W == n and H a power of two close to sqrt(n)."""
    h = 2 ** (int(math.log2(n)) // 2) if n & (n - 1) == 0 else 1
    return h, n // h


def fit_exponent(ns, ts):
    """Slope of the least-squares line through (log n, log t)."""
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def bench_attention(tokens=DEFAULT_TOKENS, dim=64, reps=20, seed=0):
    """Per N: analytic FLOPs and median forward wall-clock for CASA and softmax attention."""
    if min(tokens) < 16:
        raise ValueError("token counts must be >= 16")
    rng = np.random.default_rng(seed)
    params = CasaParams.init(dim, rng)
    rows = []
    for n in tokens:
        h, w = token_grid(n)
        x = T.Tensor(rng.standard_normal((1, dim, h, w)))
        q, k, v = (rng.standard_normal((n, dim)) for _ in range(3))
        with T.no_grad():
            t_casa = _median_time(lambda: casa_forward(x, params), reps)
            t_soft = _median_time(lambda: softmax_attention(q, k, v), reps)
        rows.append(
            {
                "n": n,
                "casa_flops": flop_count("casa", n, dim),
                "softmax_flops": flop_count("softmax", n, dim),
                "casa_s": t_casa,
                "softmax_s": t_soft,
            }
        )
    ns = [r["n"] for r in rows]
    return {
        "dim": dim,
        "reps": reps,
        "rows": rows,
        "casa_exponent": fit_exponent(ns, [r["casa_s"] for r in rows]),
        "softmax_exponent": fit_exponent(ns, [r["softmax_s"] for r in rows]),
        "casa_flop_ratio_at_4096": flop_count("casa", 8192, dim) / flop_count("casa", 4096, dim),
    }


def format_attention(report):
    lines = [f"attention scaling, d={report['dim']}, median of {report['reps']} runs"]
    lines.append(f"{'N':>6} {'CASA FLOPs':>14} {'softmax FLOPs':>16} {'CASA ms':>10} {'softmax ms':>12}")
    for r in report["rows"]:
        lines.append(
            f"{r['n']:>6} {r['casa_flops']:>14,} {r['softmax_flops']:>16,} "
            f"{1e3 * r['casa_s']:>10.3f} {1e3 * r['softmax_s']:>12.3f}"
        )
    lines.append(
        f"fitted exponents: CASA {report['casa_exponent']:.3f}, softmax {report['softmax_exponent']:.3f}; "
        f"FLOP ratio casa(8192)/casa(4096) = {report['casa_flop_ratio_at_4096']:.4f}"
    )
    return "\n".join(lines)


def _train_step(net, x, y):
    loss = T.cross_entropy_loss(net.logits(x), y)
    T.zero_grad(net.parameters())
    T.backward(loss)


def bench_kernels(reps=10, batch=16, dims=(16, 32), seed=0):
    """Training-step and depthwise-conv times for every available backend."""
    rng = np.random.default_rng(seed)
    workloads = {"eeg (21x128)": (21, 128), "fnirs od128 (68x128)": (68, 128)}
    xdw = rng.standard_normal((batch, dims[0], 17, 32))
    wdw = rng.standard_normal((dims[0], 1, 3, 3))
    prev = _kernels.get_backend()
    rows = []
    try:
        for backend in _kernels.available_backends():
            _kernels.set_backend(backend)
            row = {"backend": backend}
            for label, (h, w) in workloads.items():
                net = MecasaNet(BackboneConfig(h, w, dims), seed=seed)
                x = rng.standard_normal((batch, 1, h, w))
                y = rng.integers(0, 2, batch)
                row[f"train step {label}"] = _median_time(lambda: _train_step(net, x, y), reps)

            def dw():
                yy, ctx = _kernels.conv2d_forward(xdw, wdw, 1, 1, dims[0])
                _kernels.conv2d_backward(yy, xdw, wdw, 1, 1, dims[0], ctx)

            row["depthwise fwd+bwd"] = _median_time(dw, reps)
            rows.append(row)
    finally:
        _kernels.set_backend(prev)
    return {"batch": batch, "dims": list(dims), "reps": reps, "rows": rows}


def format_kernels(report):
    keys = [k for k in report["rows"][0] if k != "backend"]
    lines = [f"kernel backends, batch {report['batch']}, dims {report['dims']}, median ms"]
    lines.append(f"{'backend':>10} " + " ".join(f"{k:>30}" for k in keys))
    for r in report["rows"]:
        lines.append(f"{r['backend']:>10} " + " ".join(f"{1e3 * r[k]:>30.2f}" for k in keys))
    return "\n".join(lines)
