"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations record themselves on the innermost active :class:`GradTape` when at
least one input requires gradients. Outside a tape every op is a plain numpy
computation, which is what inference uses.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("sigmoid", "tanh", "relu", "linear")


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_tapes: list["GradTape"] = []


class Tensor:
    """A float64 array plus the bookkeeping needed to sit on a tape."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flat list of the entries."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor that accumulates its gradient in ``grad``."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class GradTape:
    """Records the forward graph of one pass; replayable backwards exactly once.

    Use as a context manager::

        with GradTape() as tape:
            loss = f()
        tape.backward(loss)
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._outputs: set[int] = set()
        self._used = False
        self._open = False

    def __enter__(self) -> "GradTape":
        if self._used:
            raise TapeError("tape already replayed; record a new one")
        self._open = True
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)
        self._open = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple, grad_fn: Callable) -> None:
        self._nodes.append((out, parents, grad_fn))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise TapeError("backward already called on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced under this tape")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, grad_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Parameter):
                    parent.grad += pg
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._nodes.clear()


def backward(tape: GradTape, loss: Tensor) -> None:
    tape.backward(loss)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    if _tapes and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        _tapes[-1].record(out, parents, grad_fn)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    da, db = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g * db, da.shape) if a.requires_grad else None,
                _unbroadcast(g * da, db.shape) if b.requires_grad else None)

    return _emit(da * db, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` broadcast."""
    a, b = _lift(a), _lift(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2 or da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {da.shape} and {db.shape}")

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(db, -1, -2)), da.shape)
        if b.requires_grad:
            if da.ndim == 2 or db.ndim > 2:
                gb = _unbroadcast(np.matmul(np.swapaxes(da, -1, -2), g), db.shape)
            else:
                # fold the broadcast leading axes into one big product
                k = da.shape[-1]
                gb = da.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(np.matmul(da, db), (a, b), grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(x, kind: str) -> Tensor:
    x = _lift(x)
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x.data)
        return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "relu":
        on = x.data > 0
        return _emit(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))
    if kind == "linear":
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def sigmoid(x) -> Tensor:
    return activate(x, "sigmoid")


def tanh(x) -> Tensor:
    return activate(x, "tanh")


def relu(x) -> Tensor:
    return activate(x, "relu")


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is 1.

    Masked-out positions come out as exact zeros and receive zero gradient.
    """
    scores = _lift(scores)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not m.any(axis=-1).all():
        raise DegenerateInputError("masked_softmax needs at least one valid position per row")
    s = np.where(m, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (scores,), grad_fn)


def log(x) -> Tensor:
    x = _lift(x)
    d = x.data
    return _emit(np.log(d), (x,), lambda g: (g / d,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = _lift(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def square(x) -> Tensor:
    x = _lift(x)
    d = x.data
    return _emit(d * d, (x,), lambda g: (2.0 * g * d,))


def reduce_sum(x, axis=None) -> Tensor:
    x = _lift(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(x.data.sum(axis=axis), (x,), grad_fn)


def reduce_mean(x, axis=None) -> Tensor:
    x = _lift(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _lift(x)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def index(x, key) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    x = _lift(x)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit(x.data[key], (x,), grad_fn)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), grad_fn)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]

    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(np.stack([x.data for x in xs], axis=axis), tuple(xs), grad_fn)


def glorot_init(shape: Sequence[int], rng_seed) -> np.ndarray:
    """Glorot-uniform draw; ``rng_seed`` is an int seed or a numpy Generator."""
    shape = tuple(int(s) for s in shape)
    if len(shape) >= 2:
        fan_in, fan_out = shape[-2], shape[-1]
    else:
        fan_in = fan_out = shape[0] if shape else 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.uniform(-limit, limit, size=shape)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must read the current values of
    ``params``; it is evaluated once under a tape and twice per coordinate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
    tape.backward(loss)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
