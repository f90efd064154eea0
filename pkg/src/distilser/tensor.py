"""Dense float64 tensors with reverse-mode automatic differentiation.

The recorded graph is the linked structure of result tensors: every
non-leaf tensor stores its op kind, its input tensors and a vector-Jacobian
closure. Tensors carry a monotonically increasing creation id, and since an
op's inputs always exist before its output, creation order is a valid
topological order; ``backward`` walks reachable nodes in reverse creation
order and accumulates gradients into a scratch table so that repeated calls
never double-count through intermediates. Only leaves with
``requires_grad`` receive a persistent ``.grad``.

All math is float64: desk-scale models are trained at full precision so
finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError
from .kernels import active as _k

_UID = itertools.count()
_grad_enabled = True

# Finite-input validation on every primitive. Costs one array scan per op;
# kept on because a NaN three modules downstream is far more expensive.
CHECK_FINITE = True


@contextmanager
def no_grad():
    """Disable graph recording; outputs become constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_prev", "_vjp", "_uid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._prev: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._uid = next(_UID)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, op={self.op!r}"
        if self.requires_grad:
            head += ", requires_grad=True"
        return head + ")"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *tensors: Tensor) -> None:
    if not CHECK_FINITE:
        return
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: input contains NaN/Inf")


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, vjp) -> Tensor:
    """Wrap op output; record the node only when tracking is needed."""
    if not (_grad_enabled and any(t.requires_grad for t in inputs)):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out.op = op
    out._prev = inputs
    out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Accumulate dRoot/dLeaf into every reachable requires_grad leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar-shaped, got {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not require grad (constant graph)")

    # reverse creation order == reverse topological order
    nodes: list[Tensor] = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._prev)
    nodes.sort(key=lambda t: t._uid, reverse=True)

    table: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in nodes:
        g = table.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._vjp(g)
        for inp, gi in zip(node._prev, grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = table.get(id(inp))
            table[id(inp)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", a, b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), "add", vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("sub", a, b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), "sub", vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", a, b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), "mul", vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("div", a, b)
    data = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(data, (a, b), "div", vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _result(-a.data, (a,), "neg", vjp)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    _check_finite("pow", a)
    p = float(p)
    data = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(data, (a,), "pow", vjp)


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _result(data, (a,), "exp", vjp)


def log(a: Tensor) -> Tensor:
    _check_finite("log", a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _result(data, (a,), "log", vjp)


def sqrt(a: Tensor) -> Tensor:
    _check_finite("sqrt", a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / data,)

    return _result(data, (a,), "sqrt", vjp)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    _check_finite("clip_min", a)
    floor = float(floor)
    data = np.maximum(a.data, floor)
    mask = a.data > floor

    def vjp(g):
        return (g * mask,)

    return _result(data, (a,), "clip_min", vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} != {b.shape[-2]} ({a.shape} @ {b.shape})")
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(data, (a, b), "matmul", vjp)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """1-D convolution. x: [c_in, time], w: [c_out, c_in//groups, kernel]."""
    _check_finite("conv1d", x, w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected x [c_in, t] and w [c_out, c_in/g, k], got {x.shape}, {w.shape}")
    c_in, t = x.shape
    c_out, c_in_g, k = w.shape
    if c_in_g * groups != c_in:
        raise ShapeError(f"conv1d: {groups} groups of {c_in_g} channels != input channels {c_in}")
    if c_out % groups:
        raise ShapeError(f"conv1d: c_out {c_out} not divisible by groups {groups}")
    if t + 2 * pad < k:
        raise ShapeError(f"conv1d: input length {t} (+2*{pad} pad) shorter than kernel {k}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    data = _k.conv1d_forward(xd, wd, stride, pad, groups)

    def vjp(g):
        gx, gw = _k.conv1d_backward(xd, wd, np.ascontiguousarray(g), stride, pad, groups)
        return gx, gw

    return _result(data, (x, w), "conv1d", vjp)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form x * Phi(x)."""
    _check_finite("gelu", a)
    data = _k.gelu_forward(a.data)

    def vjp(g):
        return (_k.gelu_backward(a.data, g),)

    return _result(data, (a,), "gelu", vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted before exponentiation)."""
    _check_finite("softmax", a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return ((g - (g * data).sum(axis=axis, keepdims=True)) * data,)

    return _result(data, (a,), "softmax", vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _result(data, (a,), "log_softmax", vjp)


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization along `axis` (no affine)."""
    _check_finite("normalize", a)
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    data = (a.data - mu) * inv_std

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * data).mean(axis=axis, keepdims=True)
        return ((g - gm - data * gy) * inv_std,)

    return _result(data, (a,), "normalize", vjp)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last (feature) axis of each frame."""
    return normalize(a, axis=-1, eps=eps)


def group_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-channel normalization over time for [..., channels, time] input
    (one group per channel)."""
    return normalize(a, axis=-1, eps=eps)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _result(data, (a,), "sum", vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, float(g) / n),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / n,)

    return _result(data, (a,), "mean", vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _result(data, (a,), "transpose", vjp)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), "reshape", vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def vjp(g):
        out = np.zeros(a.shape)
        out[idx] = g
        return (out,)

    return _result(data, (a,), "narrow", vjp)


def pad_end(a: Tensor, axis: int, total: int) -> Tensor:
    """Zero-pad along `axis` up to length `total`."""
    current = a.shape[axis]
    if total < current:
        raise ShapeError(f"pad_end: target {total} < current {current}")
    if total == current:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, total - current)
    data = np.pad(a.data, widths)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(0, current)
    idx = tuple(idx)

    def vjp(g):
        return (g[idx],)

    return _result(data, (a,), "pad_end", vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, "stack", vjp)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask_bias: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    q,k,v: [..., time, head_dim]; mask_bias, when given, is added to the
    score matrix (large negative entries exclude padded keys).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: head dims differ, {q.shape} vs {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * scale
    if mask_bias is not None:
        scores = scores + mask_bias
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# Primitive registry: op-kind name -> callable, the single dispatch surface
# used by forward_primitive and the gradient-check report.
PRIMITIVES = {
    "matmul": matmul,
    "conv1d": conv1d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "group_norm": group_norm,
    "mean": mean,
    "sum": sum_,
    "transpose": transpose,
    "reshape": reshape,
    "scaled_dot_attention": scaled_dot_attention,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "clip_min": clip_min,
    "pow": pow_scalar,
    "neg": neg,
    "stack": stack,
    "pad_end": pad_end,
    "narrow": narrow,
}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply a primitive by kind name (see PRIMITIVES for the vocabulary)."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"forward_primitive: unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def grad_check(f, inputs, step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    `f` must map the given tensors to a scalar tensor deterministically.
    Error per element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    tensors = []
    for x in inputs:
        t = x if isinstance(x, Tensor) else Tensor(x)
        t.data = np.ascontiguousarray(t.data)  # probed in place below
        t.requires_grad = True
        t.grad = None
        tensors.append(t)

    out = f(*tensors)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f returned shape {out.shape}, expected scalar")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f is non-finite at the evaluation point")

    if out.requires_grad:
        backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    else:  # f ignores its inputs
        analytic = [np.zeros_like(t.data) for t in tensors]

    max_err = 0.0
    with no_grad():
        for t, an in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*tensors).item()
                flat[i] = orig - step
                fm = f(*tensors).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("grad_check: f is non-finite at a probe point")
                numeric = (fp - fm) / (2.0 * step)
                err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
                if err > max_err:
                    max_err = err
    return max_err
