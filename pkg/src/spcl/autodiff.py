"""Reverse-mode automatic differentiation over dense float64 arrays.

The tape records coarse tensor primitives (matmul, elementwise math,
reductions). Every vector-Jacobian product is expressed with the same
primitives, so a backward pass run with ``create_graph=True`` is itself
differentiable. That is what makes meta-gradients through unrolled SGD
steps and Hessian-vector products exact rather than approximated.

Values are immutable after construction and the grad-enabled flag is
thread-local, so graphs may be built and replayed concurrently.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError

_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; computations return constant tensors."""
    prev = grad_enabled()
    _tls.enabled = False
    try:
        yield
    finally:
        _tls.enabled = prev


@contextmanager
def _enable_grad():
    prev = grad_enabled()
    _tls.enabled = True
    try:
        yield
    finally:
        _tls.enabled = prev


class Tensor:
    """One node of the computation graph wrapping a float64 ndarray.

    ``parents`` and ``vjp`` are set only for recorded ops; leaves carry
    ``requires_grad=True`` and no parents. Data is never mutated in place.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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


def leaf(data) -> Tensor:
    """Differentiable input node."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, vjp=vjp, requires_grad=True)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reverse numpy broadcasting: reduce g back to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = tsum(g, axis=0)
    for ax, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = tsum(g, axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
    )


def neg(a) -> Tensor:
    a = _t(a)
    return _record(-a.data, (a,), lambda g: (neg(g),))


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a) -> Tensor:
    a = _t(a)
    return _record(a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def relu(a) -> Tensor:
    a = _t(a)
    # mask is detached: second derivative of relu is zero a.e.
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),))


def tanh(a) -> Tensor:
    a = _t(a)
    out_data = np.tanh(a.data)
    out_holder = []

    def vjp(g):
        y = out_holder[0]
        return (mul(g, sub(constant(1.0), mul(y, y))),)

    out = _record(out_data, (a,), vjp)
    out_holder.append(out if out.requires_grad else Tensor(out_data))
    return out


def exp(a) -> Tensor:
    a = _t(a)
    out_data = np.exp(a.data)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    out = _record(out_data, (a,), vjp)
    out_holder.append(out if out.requires_grad else Tensor(out_data))
    return out


def reciprocal(a) -> Tensor:
    a = _t(a)
    out_data = 1.0 / a.data
    out_holder = []

    def vjp(g):
        y = out_holder[0]
        return (neg(mul(g, mul(y, y))),)

    out = _record(out_data, (a,), vjp)
    out_holder.append(out if out.requires_grad else Tensor(out_data))
    return out


def log(a) -> Tensor:
    a = _t(a)
    return _record(np.log(a.data), (a,), lambda g: (mul(g, reciprocal(a)),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    shape = a.shape
    return _record(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims),),
    )


def _expand(g, shape, axis, keepdims) -> Tensor:
    """Adjoint of ``tsum``: broadcast a reduced gradient back to ``shape``."""
    g = _t(g)
    if axis is None:
        data = np.broadcast_to(g.data, shape).copy()
    elif keepdims:
        data = np.broadcast_to(g.data, shape).copy()
    else:
        data = np.broadcast_to(np.expand_dims(g.data, axis), shape).copy()
    return _record(data, (g,), lambda h: (tsum(h, axis=axis, keepdims=keepdims),))


def tmean(a, axis=None) -> Tensor:
    a = _t(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), constant(1.0 / count))


def dot(a, b) -> Tensor:
    return tsum(mul(a, b))


def max_detached(a, axis=None, keepdims=False) -> Tensor:
    """Row maximum as a constant (used for numerically stable logsumexp;
    the shift cancels exactly so detaching keeps all derivatives exact)."""
    a = _t(a)
    return Tensor(np.max(a.data, axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# backward


def _topological(out: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def backward(out: Tensor, seed=None, wrt=(), create_graph=False) -> list[Tensor]:
    """Accumulate d(seed . out)/d(w) for every tensor in ``wrt``.

    ``seed`` defaults to ones; pass an explicit cotangent to differentiate
    a weighted combination of a non-scalar output. With ``create_graph``
    the returned gradients are themselves graph nodes and can be
    differentiated again. Accumulation order is fixed by the (deterministic)
    topological order, so results are bit-reproducible.
    """
    if not out.requires_grad:
        return [constant(np.zeros_like(w.data)) for w in wrt]
    if seed is None:
        seed_t = constant(np.ones_like(out.data))
    else:
        seed_t = _t(seed)
        if seed_t.shape != out.shape:
            raise ConfigError(
                f"backward seed shape {seed_t.shape} does not match output shape {out.shape}"
            )

    order = _topological(out)
    grads: dict[int, Tensor] = {id(out): seed_t}
    ctx = _enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    return [
        grads.get(id(w), None) or constant(np.zeros_like(w.data)) for w in wrt
    ]


# ---------------------------------------------------------------------------
# flat parameter vector


class ParamVector:
    """Named, non-overlapping views into one flat float64 parameter array.

    ``segments`` is a tuple of (name, shape, offset) covering exactly
    [0, q). Instances are treated as immutable; updates construct a new
    vector via :meth:`with_flat`.
    """

    __slots__ = ("segments", "flat")

    def __init__(self, segments, flat):
        self.segments = tuple((name, tuple(shape), int(off)) for name, shape, off in segments)
        self.flat = np.asarray(flat, dtype=np.float64)
        covered = 0
        for name, shape, off in self.segments:
            if off != covered:
                raise ConfigError(f"segment {name!r} at offset {off}, expected {covered}")
            covered += int(np.prod(shape, dtype=np.int64)) if shape else 1
        if covered != self.flat.size:
            raise ConfigError(
                f"segments cover {covered} entries but flat array has {self.flat.size}"
            )

    @property
    def q(self) -> int:
        return self.flat.size

    def arrays(self) -> list[np.ndarray]:
        out = []
        for _, shape, off in self.segments:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            out.append(self.flat[off : off + size].reshape(shape))
        return out

    def leaves(self) -> list[Tensor]:
        return [leaf(a) for a in self.arrays()]

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(self.segments, np.asarray(flat, dtype=np.float64))

    def copy(self) -> "ParamVector":
        return self.with_flat(self.flat.copy())

    def zeros_like(self) -> "ParamVector":
        return self.with_flat(np.zeros_like(self.flat))

    def __repr__(self):
        names = ",".join(name for name, _, _ in self.segments)
        return f"ParamVector(q={self.q}, segments=[{names}])"


def flatten_tensors(tensors, template: ParamVector) -> np.ndarray:
    """Concatenate per-segment gradient tensors into one flat array."""
    flat = np.empty(template.q, dtype=np.float64)
    for t, (_, shape, off) in zip(tensors, template.segments):
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        flat[off : off + size] = np.asarray(t.data, dtype=np.float64).reshape(size)
    return flat
