"""Input encoders: text to d-dim rows, feature-file tensors to d-dim rows.

One embedding table backs every text sequence (history, query, caption,
response prefix) and is also the output projection of the generator, so
the parameter is created once and passed around by reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .vocab import EOS, PAD, SOS


def positional_encoding(length: int, width: int) -> T.Tensor:
    """Fixed sinusoid table, one row per position.

    Even columns carry sin(pos / 10000^(2i/width)), odd columns cos of the
    same argument, so row 0 is [0, 1, 0, 1, ...].
    """
    if width % 2 != 0:
        raise ConfigError(f"positional encoding needs an even width, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / width)
    table = np.empty((length, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return T.Tensor(table)


@dataclass
class EncodedText:
    """A text sequence after embedding + position + normalization."""

    z: T.Tensor               # L x d
    tokens: np.ndarray        # the original index sequence, length L
    pad_mask: np.ndarray      # bool, True where the token is padding

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])


class TextEncoder:
    """Shared-table text encoder: layer_norm(E[tokens] + PE)."""

    def __init__(self, table: T.Tensor, gain: T.Tensor, bias: T.Tensor):
        self.table = table
        self.gain = gain
        self.bias = bias

    @property
    def width(self) -> int:
        return self.table.shape[1]

    def encode(self, token_ids: np.ndarray) -> EncodedText:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0:
            raise DataError("cannot encode an empty token sequence")
        rows = T.embedding_rows(self.table, ids)
        pe = positional_encoding(ids.shape[0], self.width)
        z = T.layer_norm(T.add(rows, pe), self.gain, self.bias)
        return EncodedText(z=z, tokens=ids, pad_mask=ids == PAD)


def shift_target(response_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a start...end sequence into decoder input and labels.

    Prediction at step i then conditions only on positions before i.
    """
    ids = np.asarray(response_ids, dtype=np.int64)
    if ids.size < 2 or ids[0] != SOS or ids[-1] != EOS:
        raise DataError("target sequence must begin with the start token and end with the end token")
    return ids[:-1].copy(), ids[1:].copy()


class FeatureAdapter:
    """Project precomputed features down to width d: layer_norm(relu(xW+b)).

    The incoming features are constants (never trainable); only the
    adapter's own weights receive gradients.
    """

    def __init__(self, weight: T.Tensor, bias: T.Tensor, gain: T.Tensor, ln_bias: T.Tensor):
        self.weight = weight
        self.bias = bias
        self.gain = gain
        self.ln_bias = ln_bias

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    def adapt(self, pre: T.Tensor) -> T.Tensor:
        """(... x d_pre) -> (... x d); accepts rank 2 or 3 inputs."""
        if pre.ndim not in (2, 3):
            raise DimensionError(f"feature tensor must be rank 2 or 3, got shape {pre.shape}")
        if pre.shape[-1] != self.in_width:
            raise DimensionError(
                f"feature width {pre.shape[-1]} does not match adapter input width {self.in_width}"
            )
        h = T.relu(T.linear(pre, self.weight, self.bias))
        return T.layer_norm(h, self.gain, self.ln_bias)


def pool_video(feats: T.Tensor, mode: str) -> T.Tensor:
    """Optionally collapse one video axis to a mean (ablation support).

    Applied to raw features, before any learned transform, so nothing
    downstream can reconstruct the collapsed axis.
    """
    if mode == "temporal-only":
        return T.reduce_mean(feats, axis=1, keepdims=True)
    if mode == "spatial-only":
        return T.reduce_mean(feats, axis=0, keepdims=True)
    if mode != "none":
        raise ConfigError(f"unknown pool mode {mode!r}")
    return feats
