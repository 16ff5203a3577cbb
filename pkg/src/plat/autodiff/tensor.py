"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output keeps references to its parents plus a closure that pushes the output
gradient back to them, so the graph is rebuilt on every forward pass and
:meth:`Tensor.backward` walks it in reverse topological order.

Shape alignment is explicit. The only implicit broadcast is a 1-D bias added
(or multiplied) along the last dimension.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from plat.errors import ContractError, DimensionError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-d array of 64-bit reals that can take part in reverse-mode AD.

    ``data`` is a C-contiguous ``float64`` ndarray, so ``data.ravel()`` is the
    row-major flat payload and ``prod(shape) == data.size`` always holds.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- basic protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise DimensionError("tensor / tensor is not supported; use mul with a reciprocal")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    # -- reverse pass -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, kind: str) -> None:
    # sum() is finite iff every entry is finite, barring overflow of the sum itself
    if not math.isfinite(float(out.sum())) and not np.isfinite(out).all():
        raise NumericError(f"{kind} produced a non-finite value")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, kind: str) -> Tensor:
    _check_finite(out, kind)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(out, op=kind)
    return Tensor(out, requires_grad=True, _parents=tuple(parents), _backward=backward, op=kind)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------
def _is_last_dim_vector(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]


def _reduce_to_vector(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    """Elementwise sum of equal shapes, or ``a + bias`` over the last dim."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return ((a, g), (b, g))
    elif _is_last_dim_vector(a, b):
        def backward(g):
            return ((a, g), (b, _reduce_to_vector(g)))
    else:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not conform")
    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a last-dim vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return ((a, g * b.data), (b, g * a.data))
    elif _is_last_dim_vector(a, b):
        def backward(g):
            return ((a, g * b.data), (b, _reduce_to_vector(g * a.data)))
    else:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return ((a, g * c),)

    return _make(a.data * c, (a,), backward, "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return ((a, g * out),)

    return _make(out, (a,), backward, "exp")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient flows to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data

    def backward(g):
        return ((a, np.where(pick_a, g, 0.0)), (b, np.where(pick_a, 0.0, g)))

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return ((a, np.where(inside, g, 0.0)),)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [k, n]`` (shared weight) or batched ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # fold leading axes into one GEMM; numpy would otherwise loop over the batch
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ((a, ga), (b, gb))
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ((a, ga), (b, gb))

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; with no ``axes`` a 2-d tensor is transposed."""
    if axes is None:
        if a.ndim != 2:
            raise DimensionError(f"transpose-2d needs a matrix, got shape {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((a, np.ascontiguousarray(g.transpose(inverse))),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _make(out, (a,), backward, "reshape")


def slice_(a: Tensor, index) -> Tensor:
    """Indexing; integer arrays select (possibly repeated) rows and accumulate on the way back."""
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return ((a, full),)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "slice")


def concat(tensors: Iterable[Tensor], axis: int = -2) -> Tensor:
    """Join along ``axis`` (the sequence axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, splits, axis=ax)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return ((a, np.full(a.shape, float(g))),)
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------
def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last dim. ``mask`` (bool, broadcastable) marks allowed
    entries; disallowed ones get probability exactly 0 and never influence the
    allowed ones. A row with nothing allowed yields all zeros."""
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, x.shape)
        xm = np.where(mask, x, -np.inf)
        mx = xm.max(axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x - mx, 0.0)), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out = e / np.where(z > 0, z, 1.0)

    def backward(g):
        return ((a, out * (g - (g * out).sum(axis=-1, keepdims=True))),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse

    def backward(g):
        return ((a, g - np.exp(out) * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "log_softmax")


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dim, then apply per-feature gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias must be ({d},), got {gain.shape}, {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if a.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_to_vector(g * xhat) if gain.requires_grad else None
        gb = _reduce_to_vector(g) if bias.requires_grad else None
        return ((a, gx), (gain, gg), (bias, gb))

    return _make(out, (a, gain, bias), backward, "layernorm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    u = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)),)

    return _make(out, (a,), backward, "gelu")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``ids`` of any int shape -> ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _make(out, (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood ``-log softmax(logits)[target]``.

    ``logits`` is ``[..., V]`` and ``targets`` an int array of shape ``[...]``;
    the result has shape ``[...]`` so callers can mask and reduce as needed.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    out = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        p = e / z
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return ((logits, p * g[..., None]),)

    return _make(out, (logits,), backward, "cross_entropy")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "softmax-lastdim": softmax,
    "layernorm-lastdim": layernorm,
    "gelu": gelu,
    "embedding-lookup": embedding,
    "concat-seq": concat,
    "slice": slice_,
    "cross-entropy-logits": cross_entropy,
    "mean": mean,
    "transpose-2d": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a named op kind (the registry used by the gradient suite)."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
