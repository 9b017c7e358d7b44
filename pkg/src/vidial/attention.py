"""Multi-head scaled dot-product attention with additive masking.

One helper serves every attention site in the network. Callers project
queries and keys to the attention width themselves (the projections carry
the per-site weights); this function splits heads, scores, masks, and
mixes values.

Masked positions get -1e9 added to their logits. After the softmax's
max-subtraction the exponential underflows to exactly 0.0, which is what
the causal bit-exactness and pointer zero-mass guarantees lean on.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

MASK_LOGIT = -1e9


def padding_bias(pad_mask: np.ndarray) -> np.ndarray:
    """Additive logit bias (0 or -1e9) from a boolean key-padding mask."""
    mask = np.asarray(pad_mask, dtype=bool)
    if mask.all():
        raise ContractError("attention source is entirely padding")
    return np.where(mask, MASK_LOGIT, 0.0)


def causal_bias(length: int) -> np.ndarray:
    """(length x length) bias allowing position i to see keys 0..i only."""
    return np.where(np.tril(np.ones((length, length), dtype=bool)), 0.0, MASK_LOGIT)


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    """(... x L x W) -> (... x heads x L x W/heads)."""
    if x.shape[-1] % heads != 0:
        raise DimensionError(f"width {x.shape[-1]} not divisible by {heads} heads")
    per = x.shape[-1] // heads
    if x.ndim == 2:
        length = x.shape[0]
        return T.permute(T.reshape(x, (length, heads, per)), (1, 0, 2))
    if x.ndim == 3:
        batch, length = x.shape[0], x.shape[1]
        return T.permute(T.reshape(x, (batch, length, heads, per)), (0, 2, 1, 3))
    raise DimensionError(f"attention operand must be rank 2 or 3, got shape {x.shape}")


def _merge_heads(x: T.Tensor) -> T.Tensor:
    """Inverse of _split_heads for the value path."""
    if x.ndim == 3:
        heads, length, per = x.shape
        return T.reshape(T.permute(x, (1, 0, 2)), (length, heads * per))
    batch, heads, length, per = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (batch, length, heads * per))


def guided_attention(
    query_proj: T.Tensor,
    key_proj: T.Tensor,
    values: T.Tensor,
    heads: int,
    bias: np.ndarray | None = None,
) -> tuple[T.Tensor, T.Tensor]:
    """Attend queries over keys; returns (mixed values, attention weights).

    Shapes, flat form: query_proj Lq x W, key_proj Lk x W, values Lk x dv.
    Batched form adds one identical leading axis to all three. ``bias`` is
    broadcast onto the (Lq x Lk) logit block of every head.

    Returns the value mixture (Lq x dv, batched: B x Lq x dv) and the
    post-softmax weights with an explicit head axis
    (heads x Lq x Lk, batched: B x heads x Lq x Lk).
    """
    if query_proj.ndim != key_proj.ndim or key_proj.ndim != values.ndim:
        raise DimensionError(
            f"attention operands must share rank: {query_proj.shape}, {key_proj.shape}, {values.shape}"
        )
    if query_proj.shape[-1] != key_proj.shape[-1]:
        raise DimensionError(f"query/key widths differ: {query_proj.shape} vs {key_proj.shape}")
    if key_proj.shape[-2] != values.shape[-2]:
        raise DimensionError(f"key count {key_proj.shape[-2]} != value count {values.shape[-2]}")

    q = _split_heads(query_proj, heads)
    k = _split_heads(key_proj, heads)
    v = _split_heads(values, heads)
    per_head = query_proj.shape[-1] // heads

    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(per_head))
    if bias is not None:
        logits = T.add(logits, T.Tensor(np.asarray(bias, dtype=np.float64)))
    weights = T.softmax(logits, axis=-1)
    return _merge_heads(T.matmul(weights, v)), weights
