"""Dense float64 tensor core with a reverse-mode gradient tape.

All activations, parameters, and gradients in the package are carried by
:class:`Tensor`. Rank is capped at 4, values must stay finite, and tensors
are treated as immutable once created: every operation returns a new tensor.

Forward matrix products go through ``np.einsum`` rather than BLAS ``matmul``.
einsum accumulates in a fixed index order, so the rows of a product are
bit-identical whether a sequence is processed alone or as the prefix of a
longer one. The auto-regressive decoder relies on this. Backward-pass
products do not feed that contract and use the faster ``np.matmul``.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

MAX_RANK = 4

_EINSUM_MATMUL = "...ij,...jk->...ik"


def _check_finite(data: np.ndarray, op: str) -> None:
    # NaN/Inf both poison the sum, so one reduction checks the whole array.
    with np.errstate(over="ignore"):
        total = data.sum()
    if not math.isfinite(total):
        if np.isfinite(data).all():
            return  # sum overflowed on legitimately huge finite values
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """Dense rank<=4 float64 array, immutable after creation.

    ``grad`` is populated by :func:`backward` and accumulates across calls
    until reset; it lives outside the value semantics of the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "tensor"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the rank-{MAX_RANK} limit")
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


_TapeEntry = tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], Sequence[np.ndarray | None]]]

_active_tapes = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_active_tapes, "stack", None)
    if stack is None:
        stack = []
        _active_tapes.stack = stack
    return stack


class GradientTape:
    """Ordered record of operations for one forward/backward pass.

    Used as a context manager: operations executed inside the ``with`` block
    whose inputs require gradients are recorded. The tape must stay confined
    to the thread that opened it.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("gradient tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
    if not out.requires_grad:
        return
    stack = _tape_stack()
    if stack:
        stack[-1]._entries.append((out, inputs, backward_fn))


def backward(loss: Tensor, tape: GradientTape) -> None:
    """Populate ``grad`` on every leaf tensor reachable from ``loss``.

    Gradients accumulate into existing ``grad`` buffers, so several
    backward passes (one per example in a batch) sum naturally.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(entry[0]) for entry in tape._entries}
    for out, inputs, backward_fn in reversed(tape._entries):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        for inp, g in zip(inputs, backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] += g
            else:
                grads[key] = g
    # Whatever remains in the map belongs to leaves (parameters and inputs).
    by_id = {}
    for _, inputs, _ in tape._entries:
        for inp in inputs:
            if inp.requires_grad and id(inp) not in produced:
                by_id[id(inp)] = inp
    for key, leaf in by_id.items():
        g = grads.get(key)
        if g is not None:
            leaf.accumulate_grad(np.asarray(g, dtype=np.float64).reshape(leaf.shape))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank>=2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    for ea, eb in zip(reversed(a.shape[:-2]), reversed(b.shape[:-2])):
        if ea != eb and ea != 1 and eb != 1:
            raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out_data = np.einsum(_EINSUM_MATMUL, a.data, b.data, optimize=False)
    out = Tensor(out_data, a.requires_grad or b.requires_grad, _op="matmul")

    def backward_fn(g: np.ndarray):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    _record(out, (a, b), backward_fn)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}") from None
    out = Tensor(out_data, a.requires_grad or b.requires_grad, _op="add")

    def backward_fn(g: np.ndarray):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), backward_fn)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub shapes incompatible: {a.shape} - {b.shape}") from None
    out = Tensor(out_data, a.requires_grad or b.requires_grad, _op="sub")

    def backward_fn(g: np.ndarray):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), backward_fn)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shapes incompatible: {a.shape} * {b.shape}") from None
    out = Tensor(out_data, a.requires_grad or b.requires_grad, _op="mul")

    def backward_fn(g: np.ndarray):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), backward_fn)
    return out


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * factor, a.requires_grad, _op="scale")
    _record(out, (a,), lambda g: (g * factor,))
    return out


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, _op="relu")
    if a.requires_grad:
        mask = a.data > 0.0
        _record(out, (a,), lambda g: (g * mask,))
    return out


def softmax(a, axis: int) -> Tensor:
    """Stable softmax along ``axis``: rows are positive and sum to one."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=axis, keepdims=True)
    out = Tensor(out_data, a.requires_grad, _op="softmax")

    def backward_fn(g: np.ndarray):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - inner) * out_data,)

    _record(out, (a,), backward_fn)
    return out


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); clamped entries get zero gradient."""
    a = _as_tensor(a)
    clamped = np.maximum(a.data, floor)
    out = Tensor(np.log(clamped), a.requires_grad, _op="log")
    if a.requires_grad:
        inv = np.where(a.data > floor, 1.0 / clamped, 0.0)
        _record(out, (a,), lambda g: (g * inv,))
    return out


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain+bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data, x.requires_grad or gain.requires_grad or bias.requires_grad, _op="layer_norm")

    def backward_fn(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    _record(out, (x, gain, bias), backward_fn)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes incompatible: {[t.shape for t in tensors]}") from exc
    out = Tensor(out_data, any(t.requires_grad for t in tensors), _op="concat")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    _record(out, tuple(tensors), backward_fn)
    return out


def permute(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {x.shape}")
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)), x.requires_grad, _op="permute")
    inverse = tuple(np.argsort(axes))
    _record(out, (x,), lambda g: (np.transpose(g, inverse),))
    return out


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return permute(x, axes)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if len(shape) > MAX_RANK:
        raise DimensionError(f"rank {len(shape)} exceeds the rank-{MAX_RANK} limit")
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    out = Tensor(np.ascontiguousarray(out_data), x.requires_grad, _op="reshape")
    original = x.shape
    _record(out, (x,), lambda g: (g.reshape(original),))
    return out


def tile_rows(x, copies: int) -> Tensor:
    """Stack ``copies`` identical copies of ``x`` along a new leading axis."""
    x = _as_tensor(x)
    if copies < 1:
        raise DimensionError(f"tile_rows needs copies >= 1, got {copies}")
    out_data = np.broadcast_to(x.data, (copies,) + x.shape).copy()
    out = Tensor(out_data, x.requires_grad, _op="tile_rows")
    _record(out, (x,), lambda g: (g.sum(axis=0),))
    return out


def reduce_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad, _op="sum")
    in_shape = x.shape

    def backward_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    _record(out, (x,), backward_fn)
    return out


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), x.requires_grad, _op="mean")
    in_shape = x.shape
    count = x.data.size if axis is None else x.shape[axis]

    def backward_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape) / count,)

    _record(out, (x,), backward_fn)
    return out


def embedding_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be a flat sequence, got shape {ids.shape}")
    from .errors import VocabularyError

    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(
            f"token index out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}"
        )
    out = Tensor(table.data[ids], table.requires_grad, _op="embedding")

    def backward_fn(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), backward_fn)
    return out


def pointer_scatter(probs: Tensor, tokens: np.ndarray, vocab_size: int) -> Tensor:
    """Aggregate per-position attention mass into vocabulary slots.

    ``probs`` is (rows x positions); position ``l`` contributes its mass to
    column ``tokens[l]``. Slots for tokens absent from the source stay at
    exactly 0.0.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    rows, positions = probs.shape
    if tokens.shape != (positions,):
        raise DimensionError(f"tokens shape {tokens.shape} does not match {positions} positions")
    row_idx = np.arange(rows)[:, None]
    col_idx = np.broadcast_to(tokens[None, :], (rows, positions))
    out_data = np.zeros((rows, vocab_size))
    np.add.at(out_data, (row_idx, col_idx), probs.data)
    out = Tensor(out_data, probs.requires_grad, _op="pointer_scatter")
    _record(out, (probs,), lambda g: (g[row_idx, col_idx],))
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out
