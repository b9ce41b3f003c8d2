"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on tensors record themselves on the active :class:`Tape` whenever
one of their operands is tracked (a :class:`Param`, or the output of an
earlier recorded operation). ``Tape.backward`` walks the recorded nodes in
reverse and accumulates gradients into the ``grad`` buffer of every
:class:`Param` it reaches.

Broadcasting is deliberately limited to scalar-with-tensor; adding a bias
row to a batch goes through :func:`bias_add`.

    >>> x = Param(np.array([1.0, 2.0, 3.0]))
    >>> with Tape() as tape:
    ...     tape.backward(sum_(square(x)))
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, _tape: "Tape | None" = None, _node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self._tape = _tape
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None" = None, node: int | None = None) -> "Tensor":
        # internal: take ownership of a freshly computed array without copying
        t = object.__new__(Tensor)
        arr.flags.writeable = False
        t.data = arr
        t._tape = tape
        t._node = node
        return t

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}", "tensor-ad.item")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.data!r})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Param(Tensor):
    """Trainable leaf. ``value`` may be replaced in place by optimizers."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, new) -> None:
        arr = np.array(new, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} to param of shape {self.shape}", "tensor-ad.assign")
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Append-only record of primitive operations for one forward pass.

    Use as a context manager; operations executed inside the block are
    recorded. A tape is consumed by :meth:`backward`.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._rules: list[Callable | None] = []
        self._leaves: dict[int, Param] = {}
        self._leaf_node: dict[int, int] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._rules)

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if isinstance(t, Param):
            key = id(t)
            node = self._leaf_node.get(key)
            if node is None:
                node = len(self._rules)
                self._parents.append(())
                self._rules.append(None)
                self._leaves[node] = t
                self._leaf_node[key] = node
            return node
        return None

    def _record(self, parents: tuple[int | None, ...], rule: Callable) -> int:
        node = len(self._rules)
        self._parents.append(tuple(-1 if p is None else p for p in parents))
        self._rules.append(rule)
        return node

    def backward(self, root: Tensor, params: Iterable[Param] | None = None) -> None:
        """Accumulate d(root)/d(param) into ``param.grad``.

        When ``params`` is given only those parameters receive gradients;
        the rest of the graph is still traversed (frozen parameters).
        """
        if self._consumed:
            raise ContractError("tape already consumed", "tensor-ad.backward")
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}", "tensor-ad.backward")
        self._consumed = True
        allowed = None if params is None else {id(p) for p in params}
        if root._tape is not self or root._node is None:
            self._clear()
            return
        grads: list[np.ndarray | None] = [None] * len(self._rules)
        grads[root._node] = np.ones_like(root.data)
        for node in range(root._node, -1, -1):
            g = grads[node]
            if g is None:
                continue
            rule = self._rules[node]
            if rule is None:
                p = self._leaves[node]
                if allowed is None or id(p) in allowed:
                    p.grad = p.grad + g
                continue
            local = rule(g)
            for parent, pg in zip(self._parents[node], local):
                if parent < 0 or pg is None:
                    continue
                prev = grads[parent]
                grads[parent] = pg if prev is None else prev + pg
            grads[node] = None
        self._clear()

    def _clear(self) -> None:
        self._parents.clear()
        self._rules.clear()
        self._leaves.clear()
        self._leaf_node.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced", where)
    return arr


def _emit(out, inputs: Sequence[Tensor], rule: Callable, where: str) -> Tensor:
    out = np.array(out, dtype=np.float64, copy=None)
    if out.base is not None or not out.flags.owndata:
        out = out.copy()
    _finite(out, where)
    tape = _active_tape()
    if tape is not None:
        nodes = tuple(tape._node_of(t) for t in inputs)
        if any(n is not None for n in nodes):
            return Tensor._wrap(out, tape, tape._record(nodes, rule))
    return Tensor._wrap(out)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


def _check_binary(a: Tensor, b: Tensor, where: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible", where)


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "tensor-ad.add")
    out = a.data + b.data
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "tensor-ad.add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "tensor-ad.sub")
    out = a.data - b.data
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "tensor-ad.sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "tensor-ad.mul")
    ad, bd = a.data, b.data
    out = ad * bd
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)), "tensor-ad.mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "tensor-ad.scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}", "tensor-ad.matmul")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite output is raised by _emit
        out = ad @ bd
    return _emit(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "tensor-ad.matmul")


def bias_add(x, b) -> Tensor:
    """Add a row vector ``b`` of shape [n] to every row of ``x`` [m×n]."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add of {x.shape} and {b.shape}", "tensor-ad.bias_add")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "tensor-ad.bias_add")


# ----------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "tensor-ad.neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "tensor-ad.relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tensor-ad.tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "tensor-ad.sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _emit(out, (a,), lambda g: (g * _sigmoid(x),), "tensor-ad.softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "tensor-ad.exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value", "tensor-ad.log")
    return _emit(np.log(x), (a,), lambda g: (g / x,), "tensor-ad.log")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x == 0):
        raise DomainError("reciprocal of zero", "tensor-ad.reciprocal")
    out = 1.0 / x
    return _emit(out, (a,), lambda g: (-g * out * out,), "tensor-ad.reciprocal")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,), "tensor-ad.square")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient is zero where clipping is active."""
    a = as_tensor(a)
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return _emit(np.clip(x, lo, hi), (a,), lambda g: (g * mask,), "tensor-ad.clamp")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got {a.shape}", "tensor-ad.transpose")
    return _emit(a.data.T, (a,), lambda g: (g.T,), "tensor-ad.transpose")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e), "tensor-ad.reshape") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),), "tensor-ad.reshape")


# ---------------------------------------------------------------- reductions


def _check_axis(a: Tensor, axis: int | None, where: str) -> None:
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}", where)


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "tensor-ad.sum")
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(out, (a,), rule, "tensor-ad.sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "tensor-ad.mean")
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DomainError("mean of empty tensor", "tensor-ad.mean")
    return scale(sum_(a, axis), 1.0 / n)


# ------------------------------------------------------------ verification


def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ContractError("step must be positive", "tensor-ad.finite_diff")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}", "tensor-ad.finite_diff")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_of(f: Callable[[], Tensor], params: Sequence[Param]) -> list[np.ndarray]:
    """Run ``f`` on a fresh tape and return d f / d p for each param.

    Existing ``grad`` buffers are left untouched.
    """
    saved = [p.grad for p in params]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        tape.backward(out, params)
    result = [p.grad for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return result


def rel_error(a: np.ndarray, b: np.ndarray, abs_floor: float = 1e-8) -> float:
    """Largest elementwise relative error, ignoring entries below ``abs_floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(diff <= abs_floor, 0.0, diff / np.where(denom > 0, denom, 1.0))
    return float(rel.max()) if rel.size else 0.0
