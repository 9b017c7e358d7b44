"""Auto-regressive response decoder.

Each block runs four attention stages in a fixed order — causal
self-attention over the response prefix, then cross-attention into the
dialogue history, the current query, and the fused video representation —
followed by a position-wise feed-forward. Every stage is wrapped as
layer_norm(x + stage(x)).

The whole stack is strictly causal: output row i is a function of input
rows 0..i only, bit-for-bit, so greedy decoding can recompute the full
prefix each step and still behave as if it were incremental.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import causal_bias, guided_attention, padding_bias
from .errors import ConfigError
from .params import ParameterSet


class MultiHeadAttention:
    """Projected multi-head attention with residual + layer-norm."""

    def __init__(self, ps: ParameterSet, prefix: str, d: int, d_att: int, heads: int):
        self.query_proj = ps.matrix(f"{prefix}.query_proj", d, d_att)
        self.key_proj = ps.matrix(f"{prefix}.key_proj", d, d_att)
        self.value_proj = ps.matrix(f"{prefix}.value_proj", d, d)
        self.out_proj = ps.matrix(f"{prefix}.out_proj", d, d)
        self.ln_gain = ps.ones(f"{prefix}.ln.gain", d)
        self.ln_bias = ps.zeros(f"{prefix}.ln.bias", d)
        self.heads = heads

    def run(self, x: T.Tensor, source: T.Tensor, bias: np.ndarray | None = None):
        q = T.matmul(x, self.query_proj)
        k = T.matmul(source, self.key_proj)
        v = T.matmul(source, self.value_proj)
        mixed, weights = guided_attention(q, k, v, self.heads, bias=bias)
        out = T.layer_norm(T.add(x, T.matmul(mixed, self.out_proj)), self.ln_gain, self.ln_bias)
        return out, weights


class FeedForward:
    """Position-wise two-layer expansion (inner width 4d), residual + norm."""

    def __init__(self, ps: ParameterSet, prefix: str, d: int):
        self.w1 = ps.matrix(f"{prefix}.w1", d, 4 * d)
        self.b1 = ps.zeros(f"{prefix}.b1", 4 * d)
        self.w2 = ps.matrix(f"{prefix}.w2", 4 * d, d)
        self.b2 = ps.zeros(f"{prefix}.b2", d)
        self.ln_gain = ps.ones(f"{prefix}.ln.gain", d)
        self.ln_bias = ps.zeros(f"{prefix}.ln.bias", d)

    def run(self, x: T.Tensor) -> T.Tensor:
        inner = T.relu(T.linear(x, self.w1, self.b1))
        return T.layer_norm(T.add(x, T.linear(inner, self.w2, self.b2)), self.ln_gain, self.ln_bias)


@dataclass
class BlockTrace:
    self_attn: T.Tensor
    history: T.Tensor
    query: T.Tensor
    video: T.Tensor

    def score_tensors(self) -> list[T.Tensor]:
        return [self.self_attn, self.history, self.query, self.video]


class DecoderBlock:
    def __init__(self, ps: ParameterSet, prefix: str, d: int, d_att: int, heads: int):
        self.self_attn = MultiHeadAttention(ps, f"{prefix}.self", d, d_att, heads)
        self.history = MultiHeadAttention(ps, f"{prefix}.history", d, d_att, heads)
        self.query = MultiHeadAttention(ps, f"{prefix}.query", d, d_att, heads)
        self.video = MultiHeadAttention(ps, f"{prefix}.video", d, d_att, heads)
        self.ff = FeedForward(ps, f"{prefix}.ff", d)

    def run(self, x, z_his, z_que, z_vid, causal, his_bias, que_bias):
        x, w_self = self.self_attn.run(x, x, bias=causal)
        x, w_his = self.history.run(x, z_his, bias=his_bias)
        x, w_que = self.query.run(x, z_que, bias=que_bias)
        x, w_vid = self.video.run(x, z_vid)
        x = self.ff.run(x)
        return x, BlockTrace(w_self, w_his, w_que, w_vid)


class Decoder:
    """Stack of decoder blocks over the three text sources plus fused video."""

    def __init__(self, ps: ParameterSet, prefix: str, blocks: int, d: int, d_att: int, heads: int):
        if blocks < 1:
            raise ConfigError(f"need at least one decoder block, got {blocks}")
        self.blocks = [
            DecoderBlock(ps, f"{prefix}.block{i}", d, d_att, heads) for i in range(blocks)
        ]

    def run(
        self,
        z_res: T.Tensor,
        z_his: T.Tensor,
        z_que: T.Tensor,
        z_vid: T.Tensor,
        his_pad: np.ndarray | None = None,
        que_pad: np.ndarray | None = None,
    ):
        causal = causal_bias(z_res.shape[0])
        his_bias = padding_bias(his_pad) if his_pad is not None else None
        que_bias = padding_bias(que_pad) if que_pad is not None else None
        x = z_res
        traces: list[BlockTrace] = []
        for block in self.blocks:
            x, trace = block.run(x, z_his, z_que, z_vid, causal, his_bias, que_bias)
            traces.append(trace)
        return x, traces
