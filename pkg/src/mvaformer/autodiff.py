"""
Dense tensors with define-by-run reverse-mode differentiation.

Every op that produces a :class:`Tensor` from inputs requiring gradients
records its parents and a backward rule on the output.  Node ids come from a
global counter, so creation order is a valid topological order: ``backward``
collects the nodes reachable from the loss, sorts them by id and replays the
rules from newest to oldest.  The tape is therefore rebuilt on every forward
pass and never outlives the tensors that reference it.

Arrays are plain numpy ``float32`` (training) or ``float64`` (gradient
checks).  Python scalars adopt the dtype of the tensor they meet.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from scipy import special

from .errors import ContractError, ShapeError

_ids = itertools.count()
_state = threading.local()

# Additive constants standing in for -inf in attention masks.
MASKED_F32 = -1e9
MASKED_F64 = -1e30


def masked_value(dtype) -> float:
    return MASKED_F64 if np.dtype(dtype) == np.float64 else MASKED_F32


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Set the dtype used when a Tensor is built from non-float data."""
    prev = _default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators ----------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_over_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _make(data, parents, rule):
    """Wrap ``data``; attach ``rule(g) -> per-parent grads`` when tracking."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------
def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def rule(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), rule)


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def rule(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule)


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def rule(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), rule)


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "div")

    def rule(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), rule)


def matmul(a, b):
    """Batched matrix product ``[..., p, q] @ [..., q, r] -> [..., p, r]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    if b.ndim == 2:
        # shared right operand (linear layers): one flat GEMM each way
        q, r = b.shape
        out = (a.data.reshape(-1, q) @ b.data).reshape(a.shape[:-1] + (r,))

        def rule(g):
            g2 = g.reshape(-1, r)
            return ((g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None,
                    a.data.reshape(-1, q).T @ g2 if b.requires_grad else None)

        return _make(out, (a, b), rule)

    def rule(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule)


# -- unary -------------------------------------------------------------------
def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x):
    out = special.expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


_SQRT1_2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _SQRT1_2))
    out = (x.data * cdf).astype(x.dtype)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), rule)


def dropout(x, rate, rng, training=True):
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- reductions ------------------------------------------------------------------
def _check_axis(x, axis):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")
    return axis


def sum_(x, axis=None, keepdims=False):
    axis = _check_axis(x, axis)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), rule)


def mean_over_axis(x, axis=None, keepdims=False):
    axis = _check_axis(x, axis)
    axes = range(x.ndim) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), rule)


def max_over_axis(x, axis, keepdims=False):
    """Maximum along one axis; the gradient goes to the first maximal element."""
    _check_axis(x, axis)
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), rule)


# -- shape ops -------------------------------------------------------------------
def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def slice_(x, index):
    out = x.data[index]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, dtype=x.dtype), (x,), rule)


def take(x, indices):
    """Gather rows of ``x`` along axis 0; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices.ravel(), g.reshape((indices.size,) + x.shape[1:]))
        return (gx,)

    return _make(x.data[indices], (x,), rule)


# -- composite ops with fused backward ---------------------------------------------
def masked_softmax(logits, mask=None):
    """
    Softmax over the last axis with an additive mask.

    ``mask`` holds 0 for visible entries and a large negative constant for
    hidden ones.  Hidden entries come out exactly 0.  Rows with every entry
    hidden return all zeros; the boolean array returned alongside the
    probabilities marks those rows and callers must handle them.

    Returns:
        (probs, empty_rows)
    """
    if mask is None:
        y = logits.data - logits.data.max(axis=-1, keepdims=True)
        empty = np.zeros(y.shape[:-1], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=logits.dtype)
        _check_broadcast(logits, Tensor(mask), "masked_softmax")
        y = logits.data + mask
        y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    if mask is not None:
        hidden = mask < 0
        y *= ~hidden
        empty = np.broadcast_to(hidden.all(axis=-1), y.shape[:-1])

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (logits,), rule), empty


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), rule)


def binary_cross_entropy(probs, targets, clamp=1e-7):
    """Mean BCE on probabilities clamped to ``[clamp, 1 - clamp]``."""
    targets = np.asarray(targets, dtype=probs.dtype)
    if targets.shape != probs.shape:
        raise ShapeError(f"bce: probabilities {probs.shape} vs targets {targets.shape}")
    p = np.clip(probs.data, clamp, 1 - clamp)
    n = probs.size
    loss = -(targets * np.log(p) + (1 - targets) * np.log(1 - p)).mean()
    inside = (probs.data >= clamp) & (probs.data <= 1 - clamp)

    def rule(g):
        return (g * inside * (p - targets) / (p * (1 - p)) / n,)

    return _make(np.asarray(loss, dtype=probs.dtype), (probs,), rule)


# -- driver ----------------------------------------------------------------------------
def build_tape(root):
    """Nodes reachable from ``root`` that carry backward rules, oldest first."""
    seen = set()
    nodes = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack_.extend(t._parents)
    nodes.sort(key=lambda t: t.node_id)
    return nodes


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    for node in tape:
        node.grad = None
    loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    for node in reversed(tape):
        if node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g


def grad_check(f, inputs, epsilon=1e-6, seed=0):
    """
    Compare analytic gradients against central differences.

    ``f`` maps the input tensors to a tensor; non-scalar outputs are reduced
    with a fixed random weighting so every output coordinate participates.
    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over all input
    coordinates.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ContractError(f"grad_check: epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)

    def scalar(o):
        return sum_(o * Tensor(weights, dtype=o.dtype)) if o.size > 1 or o.ndim else o

    loss = scalar(out)
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                hi = float(scalar(f(*inputs)).data)
            flat[i] = orig - epsilon
            with no_grad():
                lo = float(scalar(f(*inputs)).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * epsilon)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
