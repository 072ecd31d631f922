"""Reverse-mode automatic differentiation over float64 numpy arrays.

Computation is define-by-run: operations executed inside an active
:class:`Tape` whose inputs require gradients are appended to the tape in
execution order, which is therefore already topological.  Outside a tape the
same operations are plain numpy evaluations with no bookkeeping, which is what
the evaluation-time estimators rely on.

Broadcasting is restricted to the scalar and leading-batch cases, e.g.
``(B, d) + (d,)``.  Anything else needs an explicit :func:`broadcast`.
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from cifvi import kernels

__all__ = [
    "DomainError",
    "Gradients",
    "Module",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "apply_primitive",
    "broadcast",
    "checking",
    "clamp",
    "concat",
    "div",
    "exp",
    "finite_diff_grad",
    "log",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "neg",
    "record_op",
    "sigmoid",
    "softplus",
    "square",
    "sub",
    "sum",
    "tanh",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class DomainError(ArithmeticError):
    """A value left the domain of an operation (checked mode only)."""


_local = threading.local()
_check_default = os.environ.get("CIFVI_CHECK", "0") not in ("", "0")


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _checking() -> bool:
    return getattr(_local, "check", _check_default)


@contextlib.contextmanager
def checking(enabled: bool = True) -> Iterator[None]:
    """Enable finiteness and domain checks at every operation boundary."""
    prev = _checking()
    _local.check = enabled
    try:
        yield
    finally:
        _local.check = prev


class Tensor:
    """Dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_index")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self._tape is not None else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index) -> Tensor:
        return slice_(self, index)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def square(self) -> Tensor:
        return square(self)

    def sum(self, axis=None) -> Tensor:
        return sum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def clamp(self, lo: float, hi: float) -> Tensor:
        return clamp(self, lo, hi)


class Parameter(Tensor):
    """Named leaf tensor; trainable parameters require gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign {value.shape} to {self.data.shape}")
        self.data = value.copy()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`.

    Lookup is by tensor identity.  Tensors that the output does not depend on
    map to zeros of the right shape.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return np.array(np.broadcast_to(g, tensor.data.shape), dtype=np.float64)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tapes nest, the innermost one records.  A tape is
    single-owner: it is bound to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.parameters: dict[str, Parameter] = {}

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        for t in inputs:
            if t._tape is None and t.requires_grad and isinstance(t, Parameter):
                self.parameters.setdefault(t.name, t)
        out.requires_grad = True
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((out, inputs, vjp))

    def backward(self, output: Tensor) -> Gradients:
        """Accumulate d(output)/d(node) for every node and tracked leaf."""
        if output.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        if output._tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, inputs, vjp in reversed(self.nodes[: output._index + 1]):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return Gradients(grads)

    def gradient(self, output: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(output)
        return [grads[s] for s in sources]


def record_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a forward value and register its vector-Jacobian product.

    ``vjp(g)`` receives the output cotangent and returns one cotangent (or
    None) per input.  This is the extension point for fused kernels.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._tape = None
    out._index = -1
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                tape._record(out, tuple(inputs), vjp)
                break
    if _checking() and not np.all(np.isfinite(data)):
        raise DomainError("non-finite value produced")
    return out


# --------------------------------------------------------------------------
# shape helpers


def _check_binary(a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"shapes {sa} and {sb} need an explicit broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data)
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data)
    ad, bd = a.data, b.data
    if _checking() and np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return record_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul of {ad.shape} and {bd.shape}")

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return record_op(ad @ bd, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if _checking() and np.any(ad <= 0):
        raise DomainError("log of a non-positive value")
    return record_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)) without overflow."""
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return record_op(out, (a,), lambda g: (g * (0.5 * (np.tanh(0.5 * ad) + 1.0)),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def _expand(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.data.shape
    return record_op(np.asarray(a.data.sum(axis=axis)), (a,),
                     lambda g: (_expand(g, shape, axis),))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return record_op(np.asarray(a.data.mean(axis=axis)), (a,),
                     lambda g: (_expand(g / count, shape, axis),))


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.data.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from e
    return record_op(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    splits = np.cumsum([t.data.shape[axis] for t in ts])[:-1]
    return record_op(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def _has_array_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    advanced = _has_array_index(index)

    def vjp(g):
        out = np.zeros(shape)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return record_op(np.array(a.data[index], dtype=np.float64), (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes inside the range and is zero outside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return record_op(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis``."""
    a = as_tensor(a)
    ad = a.data
    moved = np.moveaxis(ad, axis, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    lse = kernels.logsumexp_rows(flat).reshape(moved.shape[:-1])

    def vjp(g):
        w = np.exp(ad - np.expand_dims(lse, axis))
        return (np.expand_dims(g, axis) * w,)

    return record_op(lse, (a,), vjp)


_PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "square": square,
    "sum": sum, "mean": mean, "broadcast": broadcast, "concat": concat,
    "slice": slice_, "clamp": clamp, "softplus": softplus, "logsumexp": logsumexp,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; ``concat`` takes its tensors positionally."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# --------------------------------------------------------------------------
# modules


class Module:
    """Container that discovers Parameters and sub-Modules by attribute."""

    training = True

    def _children(self) -> Iterable[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "", include_frozen: bool = True) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        seen: set[int] = set()
        self._collect(prefix, out, seen, include_frozen)
        return out

    def _collect(self, prefix, out, seen, include_frozen) -> None:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) in seen:
                    continue
                seen.add(id(value))
                if value.trainable or include_frozen:
                    value.name = name
                    out[name] = value
            else:
                value._collect(name + ".", out, seen, include_frozen)

    def parameters(self) -> list[Parameter]:
        return [p for p in self.named_parameters().values() if p.trainable]

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            p.assign(state[k])
