"""Dense tensors with a recording tape for reverse-mode differentiation.

Values are numpy arrays. Every primitive that touches a tensor requiring
gradients appends itself to the active :class:`Tape` (if any) and keeps a
closure that maps the output gradient to input gradients. :func:`backward`
walks the recorded operations in reverse order.

Training runs in 32-bit floats; :func:`precision` switches the default to
64-bit, which :func:`gradient_check` requires.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared."""


class DegenerateInputError(ValueError):
    """Input leaves an operation undefined, e.g. a fully masked softmax row."""


_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype=np.float64):
    """Temporarily change the dtype used for new tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of the operations executed while it is active.

    Operations are appended as they run, so inputs always precede the
    operations that consume them.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- basics ------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- operators ---------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
        tape = Tape.active()
        if tape is not None:
            tape.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def one_minus(a) -> Tensor:
    a = as_tensor(a)
    return _result(1.0 - a.data, (a,), lambda g: (-g,), "one_minus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def back(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), back, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log of ``max(a, eps)``; the gradient is zero where clamped."""
    a = as_tensor(a)
    x = a.data
    clamped = x < eps
    safe = np.where(clamped, eps, x)
    if np.any(safe <= 0):
        raise NumericError("log: non-positive argument")

    def back(g):
        return (np.where(clamped, 0.0, g / safe).astype(x.dtype, copy=False),)

    return _result(np.log(safe), (a,), back, "log")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: sigmoid, tanh, add, mul, sub, one_minus."""
    table = {
        "sigmoid": sigmoid,
        "tanh": tanh,
        "add": add,
        "mul": mul,
        "sub": sub,
        "one_minus": one_minus,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, back, "concat")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def back(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(out), (a,), back, "getitem")


def take_rows(table, index) -> Tensor:
    """Gather rows of a 2-D table with an integer array of any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def back(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return _result(out, (table,), back, "take_rows")


# ---------------------------------------------------------------------------
# softmax family


def _masked_logits(x: np.ndarray, mask, axis: int):
    if mask is None:
        return x, None
    mask = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool), x.shape)
    if np.any(~mask.any(axis=axis)):
        raise DegenerateInputError("softmax: a row has every position masked")
    return np.where(mask, x, -np.inf), mask


def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Max-stabilised softmax; masked positions come out exactly zero."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax: needs a non-empty axis, got shape {x.shape}")
    logits, mask = _masked_logits(x.data, mask, axis)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out.astype(x.dtype, copy=False), (x,), back, "softmax")


def log_softmax(x, mask=None, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    logits, mask = _masked_logits(x.data, mask, axis)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    if mask is not None:
        out = np.where(mask, out, 0.0)
    probs = np.exp(shifted - lse)

    def back(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _result(out.astype(x.dtype, copy=False), (x,), back, "log_softmax")


def maximum_const(a, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; gradient passes only where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    out = np.where(keep, a.data, floor).astype(a.dtype, copy=False)
    return _result(out, (a,), lambda g: (np.where(keep, g, 0.0),), "maximum")


# ---------------------------------------------------------------------------
# reverse pass


def _topological(loss: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(param) for every parameter.

    If ``tape`` is given its recorded order drives the sweep, otherwise the
    graph hanging off ``loss`` is sorted topologically. Parameters the loss
    does not depend on receive zero gradients. Gradients are also stored on
    ``param.grad``.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = tape.nodes if tape is not None else _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    if params is None:
        params = [n for n in _topological(loss) if n._backward is None and n.requires_grad]
    result = {}
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        p.grad = g
        result[p] = g
    return result


# ---------------------------------------------------------------------------
# finite-difference check


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``f`` recomputes the scalar loss from the current parameter values;
    parameters are perturbed in place and restored.
    """
    if default_dtype() != np.float64:
        raise RuntimeError("gradient_check needs 64-bit precision; wrap the call in precision(np.float64)")
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.dtype != np.float64:
            raise RuntimeError(f"parameter {p.name or p!r} is {p.dtype}, expected float64")

    analytic = backward(f(), params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


@dataclass
class Adam:
    """Adam with bias correction and L2 penalty folded into the gradient."""

    params: list[Tensor]
    lr: float = 1e-3
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState.for_params(self.params)

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None):
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr, self.l2,
                  self.beta1, self.beta2, self.eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, l2: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One in-place Adam update. Raises before touching anything if a gradient is non-finite."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state have different lengths")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for {p.name or 'parameter'}")

    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if l2:
            g = g + l2 * p.data
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    state.t = t
    return state

