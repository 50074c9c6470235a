"""Dense float64 arrays with reverse-mode automatic differentiation.

Every backward rule is written in terms of other differentiable tensor ops,
so gradients themselves can be differentiated (needed for the critic's
gradient penalty).  Graph construction is controlled by a module-level flag;
see `no_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AxisOutOfRange, NonScalarLoss, ShapeMismatch

Scalar = int | float

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 n-d array with an optional backward-graph node.

    `grad` is accumulated (not overwritten) by `backward`; call `zero_grad`
    between optimizer steps.  Tensors hash by identity; `==` is not
    overloaded.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        # _vjp(g) returns one gradient Tensor (or None) per parent.
        self._vjp: Callable[[Tensor], tuple[Tensor | None, ...]] | None = None
        self._op = "leaf"

    # -- construction -------------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 vjp: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._vjp = vjp
            out._op = op
        else:
            out._parents = ()
            out._vjp = None
            out._op = op
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad)

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same data, no graph, no grad requirement."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff entry points ---------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every requires_grad leaf.

        `self` must be a scalar (one element).  Repeated calls accumulate.
        """
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {self.shape}")
        seed = Tensor(np.ones_like(self.data))
        grads = _walk(self, seed, create_graph=False)
        for t, g in grads.items():
            if t.requires_grad and t._vjp is None:
                t.grad = g.data.copy() if t.grad is None else t.grad + g.data

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def abs(self): return abs_(self)
    def square(self): return square(self)
    def sqrt(self): return sqrt(self)
    def reshape(self, *shape): return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    @property
    def T(self): return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# Backward graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs from long training graphs can exceed the
    # recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


_needed_ids: set[int] | None = None


def _slot_needed(t: Tensor) -> bool:
    """During a targeted walk, whether this operand's slot can reach any
    requested input.  Expensive vjps (the convolutions) consult it so a
    `grad(out, [x])` call never runs kernel-gradient GEMMs that would be
    thrown away."""
    return _needed_ids is None or id(t) in _needed_ids


def _walk(root: Tensor, seed: Tensor, create_graph: bool,
          toward: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Propagate `seed` from `root`; return accumulated gradients per node.

    An internal node's gradient is dropped as soon as its vjp has fired, so
    the live set tracks the backward frontier instead of the whole graph.
    With `toward`, propagation is pruned to descendants of those tensors
    (sufficient for their gradients, which are also the kept entries).
    """
    global _needed_ids
    order = _topo_order(root)
    grads: dict[Tensor, Tensor] = {root: seed}
    need: set[int] | None = None
    pinned: set[int] = set()
    if toward is not None:
        pinned = {id(t) for t in toward}
        need = set(pinned)
        for node in order:                      # parents come first
            if id(node) not in need and any(id(p) in need
                                            for p in node._parents):
                need.add(id(node))
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    try:
        _needed_ids = need
        with ctx:
            for node in reversed(order):
                g = grads.get(node)
                if g is None or node._vjp is None:
                    continue
                parent_grads = node._vjp(g)
                if id(node) not in pinned:
                    del grads[node]
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad \
                            or (need is not None and id(p) not in need):
                        continue
                    acc = grads.get(p)
                    grads[p] = pg if acc is None else add(acc, pg)
    finally:
        _needed_ids = None
    return grads


def grad(output: Tensor, inputs: Sequence[Tensor],
         create_graph: bool = False) -> list[Tensor]:
    """d(output)/d(input) for each input, as tensors.

    With `create_graph=True` the returned gradients carry their own backward
    graph and can enter further losses (double backward).  Does not touch
    `.grad` buffers.  Raises if an input is not reachable from `output`.
    """
    if output.data.size != 1:
        raise NonScalarLoss(f"grad needs a scalar output, got shape {output.shape}")
    seed = Tensor(np.ones_like(output.data))
    grads = _walk(output, seed, create_graph=create_graph, toward=inputs)
    result = []
    for t in inputs:
        g = grads.get(t)
        if g is None:
            raise ValueError("input tensor is not part of the output's graph")
        result.append(g)
    return result


# ---------------------------------------------------------------------------
# Broadcasting support
# ---------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _binary(a, b, fwd, vjp_builder, name: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return Tensor._from_op(data, (a, b), vjp_builder(a, b), name)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    def vjp(a, b):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return _binary(a, b, np.add, vjp, "add")


def sub(a, b) -> Tensor:
    def vjp(a, b):
        return lambda g: (_unbroadcast(g, a.shape),
                          _unbroadcast(mul(g, -1.0), b.shape))
    return _binary(a, b, np.subtract, vjp, "sub")


def mul(a, b) -> Tensor:
    def vjp(a, b):
        return lambda g: (_unbroadcast(mul(g, b), a.shape),
                          _unbroadcast(mul(g, a), b.shape))
    return _binary(a, b, np.multiply, vjp, "mul")


def div(a, b) -> Tensor:
    def vjp(a, b):
        return lambda g: (_unbroadcast(div(g, b), a.shape),
                          _unbroadcast(mul(g, div(mul(a, -1.0), mul(b, b))), b.shape))
    return _binary(a, b, np.divide, vjp, "div")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = _const(np.sign(x.data))  # subgradient 0 at the kink
    return Tensor._from_op(np.abs(x.data), (x,),
                           lambda g: (mul(g, sign),), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(np.square(x.data), (x,),
                           lambda g: (mul(g, mul(x, 2.0)),), "square")


def sqrt(x) -> Tensor:
    """Elementwise square root with subgradient 0 at x == 0."""
    x = as_tensor(x)
    out = Tensor._from_op(np.sqrt(np.maximum(x.data, 0.0)), (x,), None, "sqrt")

    def vjp(g):
        # 0.5 * g / y where y > 0; the (1 - pos) pad keeps the masked
        # division finite.  Recomputing sqrt(x) here instead of closing over
        # `out` keeps the node cycle-free, so graphs die by refcount.
        pos = _const((x.data > 0.0).astype(np.float64))
        denom = add(mul(sqrt(x), 2.0), _const(1.0 - pos.data))
        return (mul(div(g, denom), pos),)

    out._vjp = vjp if out.requires_grad else None
    return out


def maximum(a, b) -> Tensor:
    def vjp(a, b):
        def run(g):
            m = a.data >= b.data  # ties go to a (arbitrary subgradient)
            ga = _unbroadcast(mul(g, _const(m.astype(np.float64))), a.shape) \
                if a.requires_grad else None
            gb = _unbroadcast(mul(g, _const((~m).astype(np.float64))), b.shape) \
                if b.requires_grad else None
            return ga, gb
        return run
    return _binary(a, b, np.maximum, vjp, "maximum")


def minimum(a, b) -> Tensor:
    def vjp(a, b):
        def run(g):
            m = a.data <= b.data
            ga = _unbroadcast(mul(g, _const(m.astype(np.float64))), a.shape) \
                if a.requires_grad else None
            gb = _unbroadcast(mul(g, _const((~m).astype(np.float64))), b.shape) \
                if b.requires_grad else None
            return ga, gb
        return run
    return _binary(a, b, np.minimum, vjp, "minimum")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    x = as_tensor(x)

    def vjp(g):
        inside = _const(((x.data > lo) & (x.data < hi)).astype(np.float64))
        return (mul(g, inside),)

    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), vjp, "clamp")


def clamp_ste(x, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to [lo, hi] with a straight-through (identity) gradient.

    Used for the generator's output range so training gradients are not
    silenced by saturation.  Deliberately not a true derivative; excluded
    from finite-difference suites.
    """
    x = as_tensor(x)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,),
                           lambda g: (g,), "clamp_ste")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _check_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise AxisOutOfRange(f"axis {a} out of range for ndim {ndim}")
        norm.append(a % ndim)
    return tuple(norm)


def _keepdims_shape(shape: tuple[int, ...], axes: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _check_axes(axis, x.ndim)
    data = np.sum(x.data, axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(x.shape, axes)

    def vjp(g):
        gk = g if keepdims else reshape(g, kshape)
        return (broadcast_to(gk, x.shape),)

    return Tensor._from_op(data, (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _check_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def amax(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; ties route the gradient to the first occurrence."""
    x = as_tensor(x)
    (ax,) = _check_axes(axis, x.ndim)
    data = np.max(x.data, axis=ax, keepdims=keepdims)
    idx = np.argmax(x.data, axis=ax)
    onehot = np.zeros_like(x.data)
    np.put_along_axis(onehot, np.expand_dims(idx, ax), 1.0, axis=ax)
    mask = _const(onehot)
    kshape = _keepdims_shape(x.shape, (ax,))

    def vjp(g):
        gk = g if keepdims else reshape(g, kshape)
        return (mul(broadcast_to(gk, x.shape), mask),)

    return Tensor._from_op(data, (x,), vjp, "amax")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    data = x.data.reshape(shape)
    orig = x.shape
    return Tensor._from_op(data, (x,), lambda g: (reshape(g, orig),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {x.shape}")
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (transpose(g),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {x.shape} to {shape}") from exc
    orig = x.shape
    return Tensor._from_op(data, (x,), lambda g: (_unbroadcast(g, orig),), "broadcast_to")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def vjp(g):
        outs, off = [], 0
        for s in sizes:
            outs.append(narrow(g, axis, off, s))
            off += s
        return tuple(outs)

    return Tensor._from_op(data, ts, vjp, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis` (a copying view)."""
    x = as_tensor(x)
    (ax,) = _check_axes(axis, x.ndim)
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    data = x.data[tuple(sl)].copy()
    before = list(x.shape)
    before[ax] = start
    after = list(x.shape)
    after[ax] = x.shape[ax] - start - length

    def vjp(g):
        parts = []
        if before[ax] > 0:
            parts.append(_const(np.zeros(before)))
        parts.append(g)
        if after[ax] > 0:
            parts.append(_const(np.zeros(after)))
        return (concat(parts, ax) if len(parts) > 1 else g,)

    return Tensor._from_op(data, (x,), vjp, "narrow")


# ---------------------------------------------------------------------------
# Matrix multiply
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return Tensor._from_op(data, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic random stream (PCG64).

    The same seed yields the same draw sequence on every run and is
    unaffected by thread count.  `state_words`/`set_state_words` expose the
    full generator state as six unsigned 64-bit integers for checkpointing.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derived(self, *keys: int) -> "Rng":
        """Independent stream addressed by (seed, *keys); reproducible."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        ss = np.random.SeedSequence((self.seed, *keys))
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    _M64 = (1 << 64) - 1

    def state_words(self) -> list[int]:
        st = self._gen.bit_generator.state
        s, inc = st["state"]["state"], st["state"]["inc"]
        return [s & self._M64, (s >> 64) & self._M64,
                inc & self._M64, (inc >> 64) & self._M64,
                int(st["has_uint32"]), int(st["uinteger"])]

    def set_state_words(self, words: Sequence[int]) -> None:
        s = int(words[0]) | (int(words[1]) << 64)
        inc = int(words[2]) | (int(words[3]) << 64)
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": s, "inc": inc},
            "has_uint32": int(words[4]),
            "uinteger": int(words[5]),
        }
