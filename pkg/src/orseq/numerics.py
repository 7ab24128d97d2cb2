"""Dense float64 arrays with a small, closed set of reverse-mode differentiable ops.

Every op builds a node holding its forward value and a closure that pushes the
output gradient back to its inputs.  ``backward(root)`` walks the recorded graph
in reverse topological order.  Inside ``no_grad()`` no graph is recorded, which
is how decoding and oracle search run.

Supported ops: matmul, add, sub, mul, tanh, sigmoid, concat, stack, reshape,
take (basic slicing), embedding, pick (per-row gather), softmax, log,
log_softmax, sum, plus two fused recurrent ops built from those pieces
(gru_cell, additive_attention) that keep the graph small.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Raised when the operands of an op have incompatible shapes."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A node in the computation graph.

    ``value`` is a float64 ndarray.  ``grad`` is allocated lazily for nodes that
    require gradients and is left as ``None`` otherwise.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> float:
        return backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731

    def __getitem__(self, index) -> Tensor:
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(value, op=op)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), bw, "mul")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _node(y, (x,), bw, "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.value)

    def bw(g):
        x._accumulate(g * y * (1.0 - y))

    return _node(y, (x,), bw, "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise ValueError("log: non-positive input")

    def bw(g):
        x._accumulate(g / x.value)

    return _node(np.log(x.value), (x,), bw, "log")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(x, w) -> Tensor:
    """``x @ w`` with ``x`` of shape (..., n) and ``w`` of shape (n, m) or (n,)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim not in (1, 2) or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError("matmul", x.shape, w.shape)
    y = x.value @ w.value

    def bw(g):
        if w.ndim == 1:
            if x.requires_grad:
                x._accumulate(g[..., None] * w.value)
            if w.requires_grad:
                w._accumulate(x.value.reshape(-1, w.shape[0]).T @ g.reshape(-1))
            return
        if x.requires_grad:
            x._accumulate(g @ w.value.T)
        if w.requires_grad:
            x2 = x.value.reshape(-1, w.shape[0])
            w._accumulate(x2.T @ g.reshape(-1, w.shape[1]))

    return _node(y, (x, w), bw, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape, f"axis={axis}")
    y = np.concatenate([t.value for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(y, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack: no inputs")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError("stack", ts[0].shape, t.shape)
    y = np.stack([t.value for t in ts], axis=axis)

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(ts, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _node(y, ts, bw, "stack")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _node(y, (x,), bw, "reshape")


def take(x, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    x = as_tensor(x)
    if isinstance(index, np.ndarray) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    ) or isinstance(index, list):
        raise TypeError("take: only basic indexing is supported; use pick/embedding")
    y = x.value[index]

    def bw(g):
        full = np.zeros_like(x.value)
        full[index] = g
        x._accumulate(full)

    return _node(np.array(y, dtype=DTYPE), (x,), bw, "take")


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape, "table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.shape[0]}): "
            f"min={int(ids.min())} max={int(ids.max())}"
        )

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _node(table.value[ids], (table,), bw, "embedding")


def pick(x, ids) -> Tensor:
    """``out[..., ] = x[..., ids[...]]``: one entry of the last axis per row."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError("pick", x.shape, ids.shape)
    y = np.take_along_axis(x.value, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        x._accumulate(full)

    return _node(y, (x,), bw, "pick")


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    y = x.value.sum(axis=axis)

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _node(np.asarray(y, dtype=DTYPE), (x,), bw, "sum")


# ---------------------------------------------------------------------------
# normalizers


def softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ValueError("softmax: empty axis")
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ValueError("log_softmax: empty axis")
    m = v.max(axis=axis, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = softmax_array(x.value, axis)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = log_softmax_array(x.value, axis)

    def bw(g):
        x._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# fused recurrent ops (one graph node each; equal to their unfused compositions)


def gru_cell(x_proj, h, U, Uh) -> Tensor:
    """GRU update from the input projection ``x_proj`` = x W + b, laid out [z | r | n].

    z = sig(x_z + h U_z), r = sig(x_r + h U_r), n = tanh(x_n + (r*h) Uh),
    h' = h + z * (n - h).
    """
    x_proj, h, U, Uh = (as_tensor(t) for t in (x_proj, h, U, Uh))
    H = h.shape[-1]
    if x_proj.shape[-1] != 3 * H or U.shape != (H, 2 * H) or Uh.shape != (H, H) or x_proj.shape[:-1] != h.shape[:-1]:
        raise ShapeError("gru_cell", x_proj.shape, h.shape, f"U {U.shape}, Uh {Uh.shape}")
    xv, hv = x_proj.value, h.value
    hu = hv @ U.value
    z = _sigmoid(xv[..., :H] + hu[..., :H])
    r = _sigmoid(xv[..., H : 2 * H] + hu[..., H:])
    rh = r * hv
    n = np.tanh(xv[..., 2 * H :] + rh @ Uh.value)
    out = hv + z * (n - hv)

    def bw(g):
        da_z = g * (n - hv) * z * (1.0 - z)
        da_n = g * z * (1.0 - n * n)
        d_rh = da_n @ Uh.value.T
        da_r = d_rh * hv * r * (1.0 - r)
        d_hu = np.concatenate([da_z, da_r], axis=-1)
        if x_proj.requires_grad:
            x_proj._accumulate(np.concatenate([da_z, da_r, da_n], axis=-1))
        if h.requires_grad:
            h._accumulate(g * (1.0 - z) + d_rh * r + d_hu @ U.value.T)
        if U.requires_grad:
            U._accumulate(hv.reshape(-1, H).T @ d_hu.reshape(-1, 2 * H))
        if Uh.requires_grad:
            Uh._accumulate(rh.reshape(-1, H).T @ da_n.reshape(-1, H))

    return _node(out, (x_proj, h, U, Uh), bw, "gru_cell")


def additive_attention(query, W, keys, v, values, score_bias=None) -> tuple[Tensor, np.ndarray]:
    """Context vectors of additive attention and the attention weights.

    scores[b, i] = v . tanh(keys[b, i] + query[b] W) + score_bias[b, i]
    alpha = softmax over i, context[b] = sum_i alpha[b, i] values[b, i].
    ``score_bias`` (0 or -inf) masks padded positions.  Returns the context
    node (B, D) and ``alpha`` as a plain array.
    """
    query, W, keys, v, values = (as_tensor(t) for t in (query, W, keys, v, values))
    B, S, A = keys.shape
    if query.shape != (B, W.shape[0]) or W.shape[1] != A or v.shape != (A,) or values.shape[:2] != (B, S):
        raise ShapeError("additive_attention", query.shape, keys.shape, f"W {W.shape}, v {v.shape}, values {values.shape}")
    qa = query.value @ W.value
    e = np.tanh(keys.value + qa[:, None, :])
    scores = e @ v.value
    if score_bias is not None:
        scores = scores + score_bias
    alpha = softmax_array(scores, axis=-1)
    ctx = np.einsum("bs,bsd->bd", alpha, values.value)

    def bw(g):
        if values.requires_grad:
            values._accumulate(alpha[:, :, None] * g[:, None, :])
        d_alpha = np.einsum("bd,bsd->bs", g, values.value)
        d_scores = alpha * (d_alpha - (alpha * d_alpha).sum(axis=-1, keepdims=True))
        if v.requires_grad:
            v._accumulate(np.einsum("bs,bsa->a", d_scores, e))
        d_pre = d_scores[:, :, None] * v.value * (1.0 - e * e)
        if keys.requires_grad:
            keys._accumulate(d_pre)
        d_qa = d_pre.sum(axis=1)
        if W.requires_grad:
            W._accumulate(query.value.T @ d_qa)
        if query.requires_grad:
            query._accumulate(d_qa @ W.value.T)

    return _node(ctx, (query, W, keys, v, values), bw, "additive_attention"), alpha


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> float:
    """Accumulate d(root)/d(leaf) into ``grad`` of every leaf that requires it.

    ``root`` must be a scalar.  Returns its value.  Intermediate gradients are
    freed once consumed, and the graph is released afterwards.
    """
    if root.value.size != 1:
        raise ShapeError("backward", root.shape, (), "root must be a scalar")
    value = float(root.value)
    if not root.requires_grad:
        return value
    order = _topo_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        node.grad = None
        node._backward = None
        node._parents = ()
    return value


def evaluate_and_backward(root: Tensor, params: Sequence[Tensor] | None = None) -> float:
    """Zero ``params`` grads (if given), back-propagate from ``root``, return its value."""
    if params is not None:
        for p in params:
            p.zero_grad()
    return backward(root)


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded uniform generator on numpy's PCG64 (128-bit LCG + permutation output).

    Child streams from ``spawn(*keys)`` depend only on ``(seed, keys)``, so a
    given (epoch, batch, purpose) always sees the same numbers no matter what
    else was drawn before.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def spawn(self, *keys: int) -> Rng:
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        if not low < high:
            raise ValueError(f"uniform: need low < high, got {low} >= {high}")
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)


def uniform(rng: Rng, low: float = 0.0, high: float = 1.0, size=None):
    return rng.uniform(low, high, size)


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(
    f: Callable[[], float], array: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a - n|| / (||a|| + ||n||)``.

    Entry-wise ratios blow up on near-zero entries where central differences
    are dominated by rounding, so the whole array is compared at once.
    """
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    n = np.asarray(numeric, dtype=DTYPE).reshape(-1)
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / denom


def gradient_check(
    build: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Largest relative error between backprop and central differences over ``params``."""
    for p in params:
        p.zero_grad()
    backward(build())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params]

    def f() -> float:
        with no_grad():
            return float(build().value)

    worst = 0.0
    for p, a in zip(params, analytic):
        num = numerical_gradient(f, p.value, h)
        worst = max(worst, relative_error(a, num))
    return worst
