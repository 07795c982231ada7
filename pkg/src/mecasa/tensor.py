"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the MECASA model needs are provided. Every op records a
backward closure and a monotone sequence number, so a :class:`GradTape`
built from a loss replays nodes in exact reverse execution order.

Gradients are never accumulated silently across backward passes: calling
:func:`backward` while a leaf still holds a gradient raises
:class:`GradientStateError`. Call :func:`zero_grad` between passes.

ReLU uses subgradient 0 at exactly 0.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import fields, is_dataclass

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientStateError(RuntimeError):
    """Raised on misuse of the gradient tape (stale grads, non-scalar loss)."""


_seq = itertools.count()
_grad_enabled = True
_flop_counter = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class FlopCounter:
    """Elementary-op tally filled by ops while :func:`count_flops` is active.

    Conventions: one unit per multiply-accumulate in conv/linear/matmul, one
    per output element for elementwise ops and bias adds, one per input
    element for pooling, four per element for softmax.
    """

    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        n = int(n)
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_flops():
    global _flop_counter
    prev, _flop_counter = _flop_counter, FlopCounter()
    try:
        yield _flop_counter
    finally:
        _flop_counter = prev


def _count(op, n):
    if _flop_counter is not None:
        _flop_counter.add(op, n)


class Tensor:
    """n-dimensional float64 array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = -1
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def backward(self, inputs=None):
        backward(self, inputs)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._seq = next(_seq)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


class GradTape:
    """Differentiable nodes reachable from an output, in execution order."""

    def __init__(self, nodes, leaves):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def record(cls, output):
        seen = set()
        nodes, leaves = [], []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t._backward is None:
                leaves.append(t)
            else:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes, leaves)

    def __len__(self):
        return len(self.nodes)

    def reverse(self):
        return reversed(self.nodes)


def backward(loss, inputs=None):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    ``inputs`` lists extra leaves that must receive a gradient even if the
    loss does not depend on them (they get zeros).
    """
    if loss.size != 1:
        raise GradientStateError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape.record(loss)
    leaves = list(tape.leaves)
    if inputs is not None:
        known = {id(t) for t in leaves}
        leaves.extend(t for t in inputs if id(t) not in known)
    stale = [t.name or repr(t) for t in leaves if t.grad is not None]
    if stale:
        raise GradientStateError(
            f"gradients already populated on {stale[:3]}; call zero_grad() before backward again"
        )
    grads = {id(loss): np.ones_like(loss.data)}
    for node in tape.reverse():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for leaf in leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)


def zero_grad(params):
    for p in params:
        p.grad = None


def named_tensors(obj, prefix=""):
    """Flatten nested dataclasses / lists of tensors into ``(name, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            if f.metadata.get("static"):
                continue
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# ops


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "add")
    _count("add", np.prod(shape))
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "sub")
    _count("sub", np.prod(shape))
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "mul")
    _count("mul", np.prod(shape))
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw, "mul")


def scale(x, c):
    c = float(c)
    _count("scale", x.size)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def reshape(x, shape):
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x):
    if x.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def sum(x):  # noqa: A001 - mirrors numpy naming
    src = x.shape
    _count("sum", x.size)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def mean(x):
    n = x.size
    src = x.shape
    _count("sum", n)
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(src, float(g) / n),), "mean")


def relu(x):
    mask = x.data > 0
    _count("relu", x.size)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    """Elementwise logistic; stable for any finite input."""
    # tanh form never overflows and is much faster than exp here
    y = 0.5 + 0.5 * np.tanh(0.5 * x.data)
    _count("sigmoid", x.size)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", 4 * x.size)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    _count("matmul", a.shape[0] * a.shape[1] * b.shape[1])

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (B, din)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight in-dim {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    B, dout = y.shape
    _count("linear", B * dout * x.shape[1])
    if bias is not None:
        y += bias.data
        _count("bias", B * dout)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, bw, "linear")


def conv2d(x, kernel, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation on NCHW input with zero padding.

    Output extent per spatial axis: ``(n + 2*padding - k) // stride + 1``.
    ``groups == channels`` gives a depthwise convolution.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (B,C,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D (Cout,Cin/groups,kh,kw), got {kernel.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"bad conv2d hyperparameters stride={stride} padding={padding} groups={groups}")
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = kernel.shape
    if C % groups:
        raise ShapeError(f"conv2d: input channels (axis 1) = {C} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: kernel axis 1 = {Cg}, expected input channels/groups = {C // groups}")
    if Cout % groups:
        raise ShapeError(f"conv2d: output channels (kernel axis 0) = {Cout} not divisible by groups={groups}")
    if H + 2 * padding < kh:
        raise ShapeError(f"conv2d: height (axis 2) {H} + 2*{padding} smaller than kernel height {kh}")
    if W + 2 * padding < kw:
        raise ShapeError(f"conv2d: width (axis 3) {W} + 2*{padding} smaller than kernel width {kw}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")

    xd, wd = x.data, kernel.data
    y, ctx = _kernels.conv2d_forward(xd, wd, stride, padding, groups)
    _count("conv2d", y.size * Cg * kh * kw)
    if bias is not None:
        y += bias.data[None, :, None, None]
        _count("bias", y.size)

    def bw(g):
        gx, gw = _kernels.conv2d_backward(
            g, xd, wd, stride, padding, groups, ctx,
            need_x=x.requires_grad, need_w=kernel.requires_grad,
        )
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(y, parents, bw, "conv2d")


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    _count("pool", x.size)
    inv = 1.0 / (H * W)

    def bw(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (B, C, H, W)).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), bw, "pool")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along {axis}: shapes {[t.shape for t in tensors]} disagree off-axis")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    _count("softmax", 4 * x.size)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects (B,K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(lse - shifted[rows, labels])
    _count("cross_entropy", 4 * logits.size)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / B),)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# verification


def finite_diff_grad(f, x, eps=1e-5, indices=None):
    """Central-difference gradient of scalar ``f`` w.r.t. ``x``.

    ``f`` takes no arguments and reads ``x.data`` (perturbed in place and
    restored). ``indices`` restricts evaluation to selected flat positions;
    other entries are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.asarray(_scalar(f())))
            flat[i] = orig - eps
            fm = float(np.asarray(_scalar(f())))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out.reshape(x.shape))


def _scalar(v):
    return v.data if isinstance(v, Tensor) else v


def gradient_check(f, inputs, eps=1e-5, max_entries=None, seed=0):
    """Worst normwise relative error between backward() and central differences.

    For each input the error is ``max|analytic - numeric| / max(max|numeric|, 1e-12)``,
    optionally over a random subset of ``max_entries`` positions.
    Returns ``{name_or_index: error}``.
    """
    zero_grad(inputs)
    loss = f()
    backward(loss, inputs=inputs)
    rng = np.random.default_rng(seed)
    errors = {}
    for i, t in enumerate(inputs):
        analytic = t.grad.reshape(-1).copy()
        if max_entries is not None and t.size > max_entries:
            sel = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            sel = np.arange(t.size)
        numeric = finite_diff_grad(f, t, eps, indices=sel).data.reshape(-1)
        denom = max(np.abs(numeric[sel]).max(initial=0.0), 1e-12)
        errors[t.name or i] = float(np.abs(analytic[sel] - numeric[sel]).max(initial=0.0) / denom)
    zero_grad(inputs)
    return errors
