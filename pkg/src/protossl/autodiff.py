"""Small reverse-mode autodiff over dense numpy arrays.

Only the operations the training losses need are provided.  Every node keeps
its value, an accumulated gradient, its parents and a closure that pushes the
node's gradient into the parents.  ``backward`` walks the graph once in
reverse topological order and then frees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import EPS


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "op", "name")

    def __init__(self, value, requires_grad=False, parents=(), op="leaf", name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value, parents, op, backward):
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents),
                 parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.value.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = const(a), const(b)
    _check_broadcast("add", a, b)

    def bw(out):
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(out.grad, b.shape))
    return _node(a.value + b.value, (a, b), "add", bw)


def sub(a, b):
    a, b = const(a), const(b)
    _check_broadcast("sub", a, b)

    def bw(out):
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(-out.grad, b.shape))
    return _node(a.value - b.value, (a, b), "sub", bw)


def mul(a, b):
    a, b = const(a), const(b)
    _check_broadcast("mul", a, b)

    def bw(out):
        _acc(a, _unbroadcast(out.grad * b.value, a.shape))
        _acc(b, _unbroadcast(out.grad * a.value, b.shape))
    return _node(a.value * b.value, (a, b), "mul", bw)


def scale(a, c: float):
    a = const(a)
    c = float(c)

    def bw(out):
        _acc(a, out.grad * c)
    return _node(a.value * c, (a,), "scale", bw)


def relu(a):
    a = const(a)
    mask = a.value > 0

    def bw(out):
        _acc(a, out.grad * mask)
    return _node(np.where(mask, a.value, 0.0), (a,), "relu", bw)


def clamp_min(a, floor: float):
    """max(a, floor); the gradient is zero where the floor is active."""
    a = const(a)
    mask = a.value > floor

    def bw(out):
        _acc(a, out.grad * mask)
    return _node(np.where(mask, a.value, floor), (a,), "clamp_min", bw)


def sigmoid(a):
    a = const(a)
    s = _sigmoid(a.value)

    def bw(out):
        _acc(a, out.grad * s * (1.0 - s))
    return _node(s, (a,), "sigmoid", bw)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a):
    """log(1 + exp(a)), computed stably."""
    a = const(a)
    x = a.value
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(out):
        _acc(a, out.grad * _sigmoid(x))
    return _node(val, (a,), "softplus", bw)


def exp(a):
    a = const(a)
    e = np.exp(a.value)

    def bw(out):
        _acc(a, out.grad * e)
    return _node(e, (a,), "exp", bw)


def log(a):
    a = const(a)

    def bw(out):
        _acc(a, out.grad / a.value)
    return _node(np.log(a.value), (a,), "log", bw)


def square(a):
    a = const(a)

    def bw(out):
        _acc(a, out.grad * 2.0 * a.value)
    return _node(a.value * a.value, (a,), "square", bw)


def sqrt(a):
    a = const(a)
    r = np.sqrt(a.value)

    def bw(out):
        _acc(a, out.grad * 0.5 / r)
    return _node(r, (a,), "sqrt", bw)


# --- linear algebra and shape ------------------------------------------------

def matmul(a, b):
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(out):
        if a.requires_grad:
            _acc(a, out.grad @ b.value.T)
        if b.requires_grad:
            _acc(b, a.value.T @ out.grad)
    return _node(a.value @ b.value, (a, b), "matmul", bw)


def transpose(a):
    a = const(a)

    def bw(out):
        _acc(a, out.grad.T)
    return _node(a.value.T, (a,), "transpose", bw)


def reshape(a, shape):
    a = const(a)
    try:
        val = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def bw(out):
        _acc(a, out.grad.reshape(a.shape))
    return _node(val, (a,), "reshape", bw)


def take_rows(a, idx):
    """Rows ``a[idx]``; repeated indices accumulate gradient."""
    a = const(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(out):
        g = np.zeros_like(a.value)
        np.add.at(g, idx, out.grad)
        _acc(a, g)
    return _node(a.value[idx], (a,), "take_rows", bw)


def concat_rows(parts):
    parts = [const(p) for p in parts]
    sizes = [p.shape[0] for p in parts]

    def bw(out):
        start = 0
        for p, n in zip(parts, sizes):
            _acc(p, out.grad[start:start + n])
            start += n
    return _node(np.concatenate([p.value for p in parts], axis=0), tuple(parts),
                 "concat_rows", bw)


# --- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = const(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))
    return _node(val, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _first_argmax(x: np.ndarray, axis: int) -> np.ndarray:
    axis = axis % x.ndim
    if axis == x.ndim - 1 or x.shape[axis] > 64:
        return np.argmax(x, axis=axis)
    # short strided axis: a running scan beats numpy's transposing argmax
    xm = np.moveaxis(x, axis, 0)
    best = xm[0].copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    for t in range(1, xm.shape[0]):
        better = xm[t] > best
        arg[better] = t
        np.maximum(best, xm[t], out=best)
    return arg


def rowwise_max(a, axis=-1):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    a = const(a)
    arg = _first_argmax(a.value, axis)
    val = np.take_along_axis(a.value, np.expand_dims(arg, axis), axis=axis)
    val = np.squeeze(val, axis=axis)

    def bw(out):
        g = np.zeros_like(a.value)
        np.put_along_axis(g, np.expand_dims(arg, axis), np.expand_dims(out.grad, axis),
                          axis=axis)
        _acc(a, g)
    return _node(val, (a,), "rowwise_max", bw)


def argmax_of(a, axis=-1):
    return np.argmax(const(a).value, axis=axis)


def logsumexp(a, axis=-1):
    a = const(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    val = np.squeeze(m + np.log(s), axis=axis)

    def bw(out):
        w = np.exp(x - m) / s
        _acc(a, w * np.expand_dims(out.grad, axis))
    return _node(val, (a,), "logsumexp", bw)


def softmax(a, axis=-1):
    a = const(a)
    x = a.value
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(out):
        g = out.grad
        _acc(a, s * (g - np.sum(g * s, axis=axis, keepdims=True)))
    return _node(s, (a,), "softmax", bw)


# --- normalisation and similarity -------------------------------------------

def row_l2_normalize(a):
    """Each row divided by max(||row||, EPS)."""
    a = const(a)
    x = a.value
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    active = norms > EPS
    denom = np.where(active, norms, EPS)
    y = x / denom

    def bw(out):
        g = out.grad
        proj = np.sum(g * y, axis=-1, keepdims=True)
        _acc(a, np.where(active, (g - y * proj) / denom, g / EPS))
    return _node(y, (a,), "row_l2_normalize", bw)


def cosine_sim_matrix(a, b):
    """Cosine similarity between every row of ``a`` and every row of ``b``."""
    a, b = const(a), const(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_sim_matrix: incompatible shapes {a.shape} and {b.shape}")
    return matmul(row_l2_normalize(a), transpose(row_l2_normalize(b)))


# --- driver ------------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, free_graph: bool = True):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad leaf."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    if free_graph:
        for node in order:
            if node.parents:
                node.parents = ()
                node._backward = None
                node.grad = None


# --- optimiser ---------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps=1e-8) -> None:
    """One in-place AdamW update over named parameter arrays.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` before the Adam step.
    """
    if lr <= 0:
        raise ValueError("adamw_step: lr must be positive")
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradient(
                f"adamw_step: parameter {name!r} has {bad} non-finite gradient entries "
                f"(shape {np.shape(g)}, step {state.step + 1})"
            )
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"adamw_step: grad shape {np.shape(g)} != param shape "
                             f"{np.shape(params[name])} for {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p *= 1.0 - lr * weight_decay
        denom = np.sqrt(v / c2)
        denom += eps
        p -= (lr / c1) * m / denom
