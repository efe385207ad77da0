"""Dense-tensor math with reverse-mode differentiation and Adam.

Define-by-run engine: each op computes its numpy result eagerly and, when
any input requires gradients, records a backward closure. ``backward`` then
walks the recorded graph once in reverse topological order, accumulating
(summing) gradients into every ``requires_grad`` leaf.

All arithmetic runs in float64. Callers that want float32 *storage* (the
checkpoint format) are expected to round parameter values to float32 after
each optimizer step; the engine itself never quantizes.

Every op also reports its floating-point cost to any active
:class:`FlopMeter`, using one fixed convention (documented per op below):

==========================  =======================================
op                          FLOPs
==========================  =======================================
matmul (n,k)@(k,m)          2*n*k*m          (multiply-accumulate = 2)
add / sub / mul             output element count (scalar operand too)
broadcast_add_bias          element count of the matrix argument
relu / tanh / sigmoid       1 per element
softmax                     5 per element
layer_norm                  8 per element
mean / max reductions       1 per input element
concat / slice / transpose  0 (data movement)
==========================  =======================================
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, ShapeError

_meters = threading.local()


class FlopMeter:
    """Context manager tallying the FLOPs of every op run inside it."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        stack = getattr(_meters, "stack", None)
        if stack is None:
            stack = _meters.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _meters.stack.pop()
        return False


def _tally(n: int) -> None:
    stack = getattr(_meters, "stack", None)
    if stack:
        for meter in stack:
            meter.total += int(n)


class Tensor:
    """A numpy float64 array plus the bookkeeping reverse mode needs."""

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the free functions hold the actual logic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _result(values, parents, backward_fn):
    """Wrap an op result, keeping the graph only where gradients can flow."""
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(values)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        t.grad += g


def _as_pair(op: str, a, b):
    if not isinstance(a, Tensor):
        raise ShapeError(f"{op}: first operand must be a Tensor")
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    elif not np.isscalar(b):
        raise ShapeError(f"{op}: second operand must be a Tensor or scalar")
    return a, b


def add(a, b):
    a, b = _as_pair("add", a, b)
    if isinstance(b, Tensor):
        out_values = a.values + b.values
        _tally(out_values.size)

        def backward(out):
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)

        return _result(out_values, (a, b), backward)
    out_values = a.values + float(b)
    _tally(out_values.size)

    def backward(out):
        _accumulate(a, out.grad)

    return _result(out_values, (a,), backward)


def sub(a, b):
    a, b = _as_pair("sub", a, b)
    if isinstance(b, Tensor):
        out_values = a.values - b.values
        _tally(out_values.size)

        def backward(out):
            _accumulate(a, out.grad)
            _accumulate(b, -out.grad)

        return _result(out_values, (a, b), backward)
    out_values = a.values - float(b)
    _tally(out_values.size)

    def backward(out):
        _accumulate(a, out.grad)

    return _result(out_values, (a,), backward)


def mul(a, b):
    a, b = _as_pair("mul", a, b)
    if isinstance(b, Tensor):
        out_values = a.values * b.values
        _tally(out_values.size)

        def backward(out):
            _accumulate(a, out.grad * b.values)
            _accumulate(b, out.grad * a.values)

        return _result(out_values, (a, b), backward)
    scale = float(b)
    out_values = a.values * scale
    _tally(out_values.size)

    def backward(out):
        _accumulate(a, out.grad * scale)

    return _result(out_values, (a,), backward)


def matmul(a: Tensor, b: Tensor):
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out_values = a.values @ b.values
    _tally(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def backward(out):
        _accumulate(a, out.grad @ b.values.T)
        _accumulate(b, a.values.T @ out.grad)

    return _result(out_values, (a, b), backward)


def broadcast_add_bias(x: Tensor, bias: Tensor):
    """x + bias with bias broadcast over rows; the only broadcast the engine allows."""
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"broadcast_add_bias: shapes {x.shape} and {bias.shape} incompatible")
    out_values = x.values + bias.values
    _tally(x.size)

    def backward(out):
        _accumulate(x, out.grad)
        _accumulate(bias, out.grad.sum(axis=0))

    return _result(out_values, (x, bias), backward)


def relu(x: Tensor):
    out_values = np.maximum(x.values, 0.0)
    _tally(x.size)

    def backward(out):
        _accumulate(x, out.grad * (x.values > 0.0))

    return _result(out_values, (x,), backward)


def tanh(x: Tensor):
    out_values = np.tanh(x.values)
    _tally(x.size)

    def backward(out):
        _accumulate(x, out.grad * (1.0 - out_values**2))

    return _result(out_values, (x,), backward)


def sigmoid(x: Tensor):
    # two-sided form keeps exp arguments non-positive (no overflow warnings)
    v = x.values
    e = np.exp(-np.abs(v))
    out_values = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    _tally(x.size)

    def backward(out):
        _accumulate(x, out.grad * out_values * (1.0 - out_values))

    return _result(out_values, (x,), backward)


def softmax(x: Tensor, axis: int):
    """Max-subtracted softmax along one axis; 5 FLOPs per element."""
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=axis, keepdims=True)
    _tally(5 * x.size)

    def backward(out):
        s = out_values
        inner = (out.grad * s).sum(axis=axis, keepdims=True)
        _accumulate(x, s * (out.grad - inner))

    return _result(out_values, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_values = xhat * gain.values + bias.values
    _tally(8 * x.size)

    def backward(out):
        g = out.grad
        _accumulate(gain, (g * xhat).sum(axis=tuple(range(x.values.ndim - 1))))
        _accumulate(bias, g.sum(axis=tuple(range(x.values.ndim - 1))))
        dxhat = g * gain.values
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(
            axis=-1, keepdims=True
        )
        _accumulate(x, inv * term)

    return _result(out_values, (x, gain, bias), backward)


def concat(xs, axis: int):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: needs at least one tensor")
    out_values = np.concatenate([t.values for t in xs], axis=axis)

    sizes = [t.shape[axis] for t in xs]

    def backward(out):
        offset = 0
        for t, n in zip(xs, sizes):
            key = [slice(None)] * out_values.ndim
            key[axis] = slice(offset, offset + n)
            _accumulate(t, out.grad[tuple(key)])
            offset += n

    return _result(out_values, tuple(xs), backward)


def slice_(x: Tensor, key):
    out_values = x.values[key]

    def backward(out):
        g = np.zeros_like(x.values)
        g[key] += out.grad
        _accumulate(x, g)

    return _result(out_values, (x,), backward)


def transpose(x: Tensor):
    if x.values.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got {x.shape}")
    out_values = x.values.T.copy()

    def backward(out):
        _accumulate(x, out.grad.T)

    return _result(out_values, (x,), backward)


def mean(x: Tensor, axis=None):
    out_values = x.values.mean(axis=axis)
    _tally(x.size)

    def backward(out):
        if axis is None:
            _accumulate(x, np.full_like(x.values, out.grad / x.size))
        else:
            n = x.values.shape[axis]
            _accumulate(x, np.expand_dims(out.grad, axis) / n * np.ones_like(x.values))

    return _result(out_values, (x,), backward)


def max_(x: Tensor, axis=None):
    out_values = x.values.max(axis=axis)
    _tally(x.size)

    def backward(out):
        # route the gradient to the first maximum, deterministically
        if axis is None:
            g = np.zeros_like(x.values)
            g.reshape(-1)[int(np.argmax(x.values))] = out.grad
            _accumulate(x, g)
        else:
            g = np.zeros_like(x.values)
            idx = np.argmax(x.values, axis=axis)
            np.put_along_axis(
                g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis
            )
            _accumulate(x, g)

    return _result(out_values, (x,), backward)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``grad``."""
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order topological sort (recursion-free)
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


@dataclass
class AdamState:
    """Adam optimizer state for one parameter list (order matters)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.values) for p in params]
    state.v = [np.zeros_like(p.values) for p in params]
    return state


def adam_step(state: AdamState, params, grads=None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    grads defaults to each parameter's accumulated ``.grad`` (missing grads
    count as zero).
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("adam_step: params, grads, and state lengths differ")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} does not match parameter {p.values.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        p.values = p.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_difference_check(f, params, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic zero-argument callable returning a scalar
    Tensor computed from ``params``. Relative error per coordinate uses the
    denominator max(1, |analytic|, |numeric|).
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params
    ]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = f().item()
            flat[i] = saved - h
            down = f().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            err = abs(ga_flat[i] - numeric) / max(1.0, abs(ga_flat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
