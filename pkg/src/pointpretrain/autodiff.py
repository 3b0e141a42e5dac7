"""Reverse-mode automatic differentiation on dense numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps an ndarray, every
operation returns a new ``Tensor`` whose backward rule is a closure, and
``backward()`` walks the recorded graph once in reverse topological order.
``grad_check`` (central finite differences) is the ground truth for every
op; run it in float64, step sizes are useless in float32.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

LOG_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()
        self._backward_done = False

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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward on a tensor with no recorded graph")
        if self._backward_done:
            raise RuntimeError("backward already ran on this graph; rebuild it first")
        self._backward_done = True

        # Iterative post-order: graphs routinely exceed the recursion limit.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def zero_grads(params) -> None:
    values = params.values() if hasattr(params, "values") else params
    for t in values:
        t.grad = None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g) -> None:
    # copy on first touch: g may alias a buffer shared with another tensor
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(parts, axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeMismatchError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward(g):
        for t, s0, s1 in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(s0), int(s1))
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def take(a, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeMismatchError(
            f"take: index out of range for first extent {a.data.shape[0]}"
        )

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(a.data[idx], (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def backward(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def _reduce_extreme(a, axis, keepdims, argfn, valfn) -> Tensor:
    # Gradient is routed only to the first extremal element along the axis
    # (np.argmax/argmin break ties at the lowest index), keeping subgradients
    # deterministic.
    a = _as_tensor(a)
    data = valfn(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        if axis is None:
            buf.flat[argfn(a.data)] = 1.0
            _accum(a, buf * g)
        else:
            idx = argfn(a.data, axis=axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(buf, np.expand_dims(idx, axis), gg, axis)
            _accum(a, buf)

    return _make(data, (a,), backward)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, np.argmax, np.max)


def reduce_min(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, np.argmin, np.min)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(a, s * (g - dot))

    return _make(s, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    # Floored at LOG_FLOOR so near-zero activations cannot emit -inf.
    a = _as_tensor(a)
    safe = np.maximum(a.data, LOG_FLOOR)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / safe)

    return _make(np.log(safe), (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / (2.0 * data))

    return _make(data, (a,), backward)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    c = erf(x / np.sqrt(2.0))
    data = 0.5 * x * (1.0 + c)

    def backward(g):
        if a.requires_grad:
            d = 0.5 * (1.0 + c) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            _accum(a, g * d)

    return _make(data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    A constant row normalizes to exactly zero (the eps keeps the division
    finite), so the pre-affine output of a constant input is all zeros.
    """
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gain), bias)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = reduce_max(a, axis=axis, keepdims=True)
    s = reduce_sum(exp(sub(a, m)), axis=axis, keepdims=True)
    out = add(log(s), m)
    if keepdims:
        return out
    shape = list(a.data.shape)
    del shape[axis if axis >= 0 else a.data.ndim + axis]
    return reshape(out, tuple(shape))


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    n = sqrt(add(reduce_sum(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, n)


def grad_check(f, inputs, eps: float = 1e-5, max_coords_per_input: int | None = None,
               rng=None) -> float:
    """Max relative error between analytic gradients of f and central differences.

    ``f`` maps the given tensors to a scalar Tensor.  Inputs are copied to
    float64.  The relative error denominator is max(1, |analytic|, |numeric|)
    per coordinate.  When ``max_coords_per_input`` is set, a seeded random
    subset of coordinates per input is probed instead of all of them.
    """
    xs = []
    for x in inputs:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        xs.append(Tensor(arr.astype(np.float64, copy=True), requires_grad=True))
    loss = f(*xs)
    if loss.data.size != 1:
        raise ShapeMismatchError("grad_check target must be scalar-valued")
    loss.backward()
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for x in xs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                fp = float(f(*xs).data)
            flat[c] = orig - eps
            with no_grad():
                fm = float(f(*xs).data)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * eps)
            ana = float(analytic.reshape(-1)[c])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    return worst
