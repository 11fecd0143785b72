"""Dense-tensor reverse-mode automatic differentiation on top of numpy.

Every operation builds a node holding its output array, its parents and a
closure mapping the upstream gradient to parent gradients.  Node ids grow
monotonically with creation, so sorting the nodes reachable from a loss by id
gives a topological order for the backward sweep.

Gradient checks run in float64; training defaults to float32.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_grad_enabled = True
_recorders: list[list["Tensor"]] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operator."""


class NonFiniteGradient(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backprop(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.name = None
    t.op = op
    t._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
        if _recorders:
            _recorders[-1].append(t)
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true and ``b`` elsewhere, copying values exactly."""
    mask = np.asarray(mask, dtype=bool)
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    try:
        np.broadcast_shapes(mask.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"where: incompatible shapes {a.shape} and {b.shape} (mask {mask.shape})") from None

    def backward(g):
        ga = _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.where(mask, a.data, b.data), (a, b), backward, "where")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes where ``a`` is above the floor."""
    keep = a.data >= floor
    return _node(np.where(keep, a.data, a.dtype.type(floor)), (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives exactly 0.5 at the origin
    return 0.5 * (np.tanh(0.5 * x) + 1)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands of rank >= 2, leading dims broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``W x + b`` with ``weight`` laid out (out, in); ``x`` may carry leading batch dims.

    A stacked weight of shape (K, out, in) applies K maps at once and yields
    (K, ..., out).
    """
    if x.ndim < 1 or weight.ndim < 2 or x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {weight.shape}")
    vec = x.ndim == 1
    xd = x.data[None, :] if vec else x.data
    wt = weight.data.swapaxes(-1, -2)
    out = np.matmul(xd, wt)
    if bias is not None:
        if bias.shape[-1] != weight.shape[-2]:
            raise ShapeError(f"affine: bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    if vec:
        out = out.reshape(out.shape[:-2] + out.shape[-1:])

    def backward(g):
        g2 = g[..., None, :] if vec else g
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unbroadcast(np.matmul(g2, weight.data), xd.shape).reshape(x.shape)
        if weight.requires_grad:
            gw = _unbroadcast(np.matmul(g2.swapaxes(-1, -2), xd), weight.shape)
        if bias is not None and bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "affine")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the backward scatters with accumulation."""
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), backward, "slice")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(tensors), backward, "stack")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate == 0:
        return x
    mask = sample_dropout_mask(x.shape, rate, rng, training=True, dtype=x.dtype)
    return mul(x, Tensor(mask))


def sample_dropout_mask(shape, rate: float, rng: np.random.Generator | None,
                        training: bool = True, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.asarray(1 - rate, dtype=dtype)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root._id: root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack_.append(p)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def _sweep(loss: Tensor, order: Iterable[Tensor]):
    grads = {loss._id: np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p._id)
            grads[p._id] = pg if prev is None else prev + pg


def backprop(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    _sweep(loss, _reachable(loss))


class Graph:
    """A traced computation: a callable over named inputs and named parameters.

    ``forward_eval`` records every node created while the callable runs; the
    recorded list is in creation order and therefore topologically sorted.
    """

    def __init__(self, fn: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Mapping[str, Tensor]],
                 parameters: Mapping[str, Tensor]):
        self.fn = fn
        self.parameters = dict(parameters)
        self.nodes: list[Tensor] = []
        self.outputs: dict[str, Tensor] | None = None

    @contextlib.contextmanager
    def recording(self):
        self.nodes = []
        _recorders.append(self.nodes)
        try:
            yield self.nodes
        finally:
            _recorders.pop()


def forward_eval(graph: Graph, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    inputs = {k: as_tensor(v) for k, v in inputs.items()}
    with graph.recording():
        outputs = dict(graph.fn(inputs, graph.parameters))
    graph.outputs = outputs
    return outputs


def backward_grads(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every parameter of ``graph`` (zeros when unused)."""
    if graph.outputs is None:
        raise RuntimeError("backward_grads called before forward_eval")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _reachable(loss) if loss.requires_grad else []
    recorded = {n._id for n in graph.nodes}
    if loss.requires_grad and not any(n._id in recorded for n in order):
        raise RuntimeError("loss does not depend on this graph's forward_eval")
    params = graph.parameters
    for p in params.values():
        p.grad = None
    _sweep(loss, order)
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves parameters and state untouched.
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Rescale ``grads`` in place to global L2 norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

class RngStreams:
    """Named counter-based (Philox) generators derived from one seed.

    Each purpose ("init", "dropout", "batching", ...) gets its own stream, so
    adding draws for one purpose never shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, purpose: str) -> np.random.Generator:
        gen = self._streams.get(purpose)
        if gen is None:
            ss = np.random.SeedSequence([self.seed, zlib.crc32(purpose.encode())])
            gen = np.random.Generator(np.random.Philox(ss))
            self._streams[purpose] = gen
        return gen

    def fresh(self, purpose: str) -> np.random.Generator:
        """A new generator at the start of ``purpose``'s stream."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(purpose.encode())])
        return np.random.Generator(np.random.Philox(ss))


def init_matrix(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_HEADER_KEY = "__header__"


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], header: Mapping | None = None):
    """Write ``name -> array`` plus a JSON header into one ``.npz`` archive.

    Arrays are stored little-endian; the header records the precision and any
    caller metadata (seeds, vocabulary, model spec).
    """
    arrays = {}
    dtypes = set()
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        arrays[name] = arr
        dtypes.add(arr.dtype.name)
    meta = {"precision": sorted(dtypes)}
    meta.update(header or {})
    arrays[_HEADER_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z[_HEADER_KEY]).decode()) if _HEADER_KEY in z.files else {}
        arrays = {k: z[k] for k in z.files if k != _HEADER_KEY}
    return arrays, header


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; returns 0 when both norms are below ``atol``."""
    diff = float(np.linalg.norm(np.ravel(analytic - numeric)))
    scale = max(float(np.linalg.norm(np.ravel(analytic))), float(np.linalg.norm(np.ravel(numeric))))
    if scale < atol:
        return 0.0 if diff < atol else math.inf
    return diff / scale


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x.data``."""
    # perturbations must land in x.data itself, not in a reshaped copy
    x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], step: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and central differences for each named tensor."""
    for t in tensors.values():
        t.grad = None
    loss = fn()
    backprop(loss)
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[name] = relative_error(analytic, numerical_grad(fn, t, step))
    return errors
