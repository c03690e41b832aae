"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a new :class:`Tensor` whose ``data`` is never mutated
afterwards. Backward closures map the output gradient to one gradient per
parent, so gradients live in a map owned by :func:`backward` rather than on
the tensors themselves.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class NonFiniteError(FloatingPointError):
    """Raised as soon as an op produces NaN or Inf."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values produced by {where}")


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "_parents", "_backward", "op", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf carrying a name and a parameter-group tag."""

    __slots__ = ("name", "group")

    def __init__(self, data, name: str, group: str, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        self.group = group

    def __repr__(self):
        return f"Parameter({self.name!r}, group={self.group!r}, shape={self.shape})"


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording graph edges when gradients are enabled."""
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only the broadcasts the layers actually need: leading axes and size-1 axes.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (or matrix-vector)."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim == 2 else g * bd
            gb = ad.T @ g if ad.ndim == 2 else g * ad
        elif ad.ndim == 1:
            ga = bd @ g
            gb = np.multiply.outer(ad, g)
        else:
            ga = g @ bd.T
            gb = ad.T @ g
        return ga, gb

    return make(ad @ bd, (a, b), backward, "matmul")


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make(np.asarray(a.data.sum(), dtype=dtype), (a,),
                lambda g: (np.broadcast_to(g, shape).astype(dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.data.size
    return make(np.asarray(a.data.mean(), dtype=dtype), (a,),
                lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make(a.data[idx], (a,), backward, "index")


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather ``a[rows]`` along axis 0; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.intp)
    n, dtype = a.shape[0], a.dtype

    def backward(g):
        flat = g.reshape(len(rows), -1)
        out = np.zeros((n, flat.shape[1]), dtype=dtype)
        np.add.at(out, rows, flat)
        return (out.reshape((n,) + a.shape[1:]),)

    return make(a.data[rows], (a,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    sig = sig.astype(x.dtype)
    return make(out.astype(x.dtype), (a,), lambda g: (g * sig,), "softplus")


def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Parameter, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to every reachable Parameter."""
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    out: dict[Parameter, np.ndarray] = {}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            out[node] = out[node] + g if node in out else g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


def gradient_check(fn: Callable[[], Tensor], params: Iterable[Parameter], epsilon: float = 1e-5,
                   samples_per_param: int = 8, rng: np.random.Generator | None = None,
                   refinements: int = 2, agreement: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar graph from the current parameter values; it is
    called once for the analytic pass and twice per sampled coordinate.

    ReLU and max-pool make the graph piecewise smooth. A switch point inside
    the +-epsilon interval biases the central difference, so each coordinate
    is also measured with epsilon shrunk by 10x, up to ``refinements`` times,
    until two successive central differences agree within ``agreement``
    (relative); the larger epsilon of that pair is reported, as it carries
    less round-off. Without agreement the last measurement counts. The choice
    never looks at the analytic value, and no coordinate is dropped.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    analytic = backward(fn())
    worst = 0.0
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"gradient_check needs float64 parameters, {p.name} is {p.dtype}")
        g = analytic.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= samples_per_param else rng.choice(n, samples_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            eps, numeric, prev = epsilon, 0.0, None
            for level in range(refinements + 1):
                flat[c] = orig + eps
                up = fn().item()
                flat[c] = orig - eps
                down = fn().item()
                flat[c] = orig
                numeric = (up - down) / (2 * eps)
                if prev is not None and abs(numeric - prev) <= agreement * max(abs(numeric), abs(prev), 1e-8):
                    numeric = prev
                    break
                prev, eps = numeric, eps / 10
            a = float(g.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass
class OptimizerState:
    """Momentum SGD state: one learning rate per parameter group, optional L2 decay on weights."""

    lr: dict[str, float]
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        for group, rate in self.lr.items():
            if rate < 0:
                raise ValueError(f"learning rate for {group!r} must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: Sequence[Parameter], grads: dict[Parameter, np.ndarray], state: OptimizerState) -> None:
    """v <- mu*v - lr*(g + wd*p) ; p <- p + v. Decay applies to weight matrices and kernels,
    not to biases. Parameters with no gradient are untouched."""
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step[{p.name}]", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of {p.name}")
        rate = state.lr[p.group]
        v = state.velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity[{p.name}]", p.shape, v.shape)
        if rate == 0.0 and not v.any():
            continue
        if state.weight_decay and p.data.ndim >= 2:
            g = g + state.weight_decay * p.data
        v = (state.momentum * v - rate * g).astype(p.dtype)
        state.velocity[p.name] = v
        # in-place so every graph holding this Parameter sees the update
        p.data += v


# -- serialization -----------------------------------------------------------

_U64 = struct.Struct("<Q")


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """rank:u64, shape:u64 x rank, then little-endian raw values."""
    arr = np.asarray(arr)   # not ascontiguousarray: that promotes rank 0 to rank 1
    head = _U64.pack(arr.ndim) + b"".join(_U64.pack(n) for n in arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def tensor_from_bytes(buf: bytes, dtype, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor blob starting at ``offset``; returns (array, next offset)."""
    dtype = np.dtype(dtype).newbyteorder("<")
    if len(buf) - offset < 8:
        raise ValueError("truncated tensor blob (rank)")
    (rank,) = _U64.unpack_from(buf, offset)
    offset += 8
    if rank > 16 or len(buf) - offset < 8 * rank:
        raise ValueError("corrupt tensor blob header")
    shape = tuple(_U64.unpack_from(buf, offset + 8 * i)[0] for i in range(rank))
    offset += 8 * rank
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise ValueError("truncated tensor blob (data)")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes
