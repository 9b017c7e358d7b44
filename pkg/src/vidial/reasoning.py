"""Query-guided reasoning over video, audio, and caption sources.

The video path runs twice with opposite axis orders: once attending over
temporal steps within each spatial cell and then across cells (t2s), once
attending over cells within each temporal step and then across steps (s2t).
Audio and caption use a single attention stage. A learned per-token score
over the attended components fuses everything into one sequence, and the
whole block can be repeated, feeding each round's fusion output back in as
the next round's query representation (fresh weights every round).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import guided_attention, padding_bias
from .errors import ConfigError, DataError
from .params import ParameterSet


class AttentionStage:
    """One attention site: key/query projections, feed-forward, skip+norm."""

    def __init__(self, ps: ParameterSet, prefix: str, d: int, d_att: int):
        self.key_proj = ps.matrix(f"{prefix}.key_proj", d, d_att)
        self.query_proj = ps.matrix(f"{prefix}.query_proj", d, d_att)
        self.ff_weight = ps.matrix(f"{prefix}.ff.weight", d, d)
        self.ff_bias = ps.zeros(f"{prefix}.ff.bias", d)
        self.ln_gain = ps.ones(f"{prefix}.ln.gain", d)
        self.ln_bias = ps.zeros(f"{prefix}.ln.bias", d)

    def attend(self, source: T.Tensor, query_side: T.Tensor, heads: int, bias=None):
        """Mix `source` rows under `query_side` guidance; no skip yet."""
        keys = T.matmul(source, self.key_proj)
        queries = T.matmul(query_side, self.query_proj)
        return guided_attention(queries, keys, source, heads, bias=bias)

    def finish(self, mixed: T.Tensor, skip: T.Tensor) -> T.Tensor:
        ff = T.relu(T.linear(mixed, self.ff_weight, self.ff_bias))
        return T.layer_norm(T.add(ff, skip), self.ln_gain, self.ln_bias)


class DirectedReasoning:
    """Two-stage attention over a (outer x inner x d) feature block.

    Stage 1 stacks the query across the outer axis and attends over the
    inner axis independently per outer slice. Stage 2 re-groups by query
    token and attends over the outer axis. For t2s the caller passes
    features as (cells x steps x d); for s2t as (steps x cells x d).
    """

    def __init__(self, ps: ParameterSet, prefix: str, d: int, d_att: int, heads: int):
        self.inner_stage = AttentionStage(ps, f"{prefix}.inner", d, d_att)
        self.outer_stage = AttentionStage(ps, f"{prefix}.outer", d, d_att)
        self.heads = heads

    def run(self, features: T.Tensor, query_repr: T.Tensor):
        outer = features.shape[0]
        length, d = query_repr.shape

        stacked = T.tile_rows(query_repr, outer)                      # outer x L x d
        mixed1, weights1 = self.inner_stage.attend(features, stacked, self.heads)
        per_slice = self.inner_stage.finish(mixed1, stacked)          # outer x L x d

        by_token = T.permute(per_slice, (1, 0, 2))                    # L x outer x d
        query_col = T.reshape(query_repr, (length, 1, d))
        mixed2, weights2 = self.outer_stage.attend(by_token, query_col, self.heads)
        out = self.outer_stage.finish(T.reshape(mixed2, (length, d)), query_repr)
        return out, (weights1, weights2)


class SingleStageReasoning:
    """One attention stage from the query over a flat source (audio/caption)."""

    def __init__(self, ps: ParameterSet, prefix: str, d: int, d_att: int, heads: int):
        self.stage = AttentionStage(ps, prefix, d, d_att)
        self.heads = heads

    def run(self, source: T.Tensor, query_repr: T.Tensor, pad_mask: np.ndarray | None = None):
        bias = padding_bias(pad_mask) if pad_mask is not None else None
        mixed, weights = self.stage.attend(source, query_repr, self.heads, bias=bias)
        return self.stage.finish(mixed, query_repr), weights


class ModalityFusion:
    """Blend attended components by a learned per-token convex score.

    The query representation joins the concatenation that produces the
    scores but is never part of the weighted sum itself.
    """

    def __init__(self, ps: ParameterSet, prefix: str, d: int, n_components: int):
        if n_components < 1:
            raise ConfigError("fusion needs at least one attended component")
        self.n_components = n_components
        # zero init: scores start exactly uniform, so no component is starved
        # of gradient before it has had a chance to learn anything
        self.weight = ps.zeros(f"{prefix}.weight", (1 + n_components) * d, n_components)

    def run(self, query_repr: T.Tensor, components: list[T.Tensor]):
        if len(components) != self.n_components:
            raise ConfigError(
                f"fusion built for {self.n_components} components, got {len(components)}"
            )
        length, d = query_repr.shape
        cat = T.concat([query_repr] + components, axis=1)
        scores = T.softmax(T.matmul(cat, self.weight), axis=-1)       # L x K
        stacked = T.concat([T.reshape(c, (1, length, d)) for c in components], axis=0)
        col = T.reshape(T.permute(scores, (1, 0)), (self.n_components, length, 1))
        fused = T.reduce_sum(T.mul(stacked, col), axis=0)             # L x d
        return fused, scores


@dataclass
class RoundTrace:
    """Attention weights captured from one reasoning round."""

    t2s: tuple | None = None
    s2t: tuple | None = None
    audio: T.Tensor | None = None
    caption: T.Tensor | None = None
    fusion: T.Tensor | None = None

    def score_tensors(self) -> list[T.Tensor]:
        out = []
        for pair in (self.t2s, self.s2t):
            if pair is not None:
                out.extend(pair)
        for single in (self.audio, self.caption, self.fusion):
            if single is not None:
                out.append(single)
        return out


@dataclass
class ReasoningSources:
    """Per-example inputs to the reasoning stack."""

    video: T.Tensor | None            # F x P x d
    audio: T.Tensor | None            # F x d
    caption: T.Tensor | None          # L_cap x d
    caption_pad: np.ndarray | None = None

    def validate(self, use_video: bool, use_audio: bool, use_caption: bool) -> None:
        if use_video:
            if self.video is None:
                raise DataError("video features required but absent")
            f, p = self.video.shape[0], self.video.shape[1]
            if f == 0 or p == 0:
                raise DataError(f"video features are empty (steps={f}, cells={p})")
        if use_audio and self.audio is None:
            raise DataError("audio features required but absent")
        if use_caption and self.caption is None:
            raise DataError("caption required but absent")


class ReasoningRound:
    """One pass of all enabled reasoning paths plus fusion."""

    def __init__(
        self,
        ps: ParameterSet,
        prefix: str,
        d: int,
        d_att: int,
        heads: int,
        use_t2s: bool,
        use_s2t: bool,
        use_audio: bool,
        use_caption: bool,
    ):
        self.use_t2s = use_t2s
        self.use_s2t = use_s2t
        self.use_audio = use_audio
        self.use_caption = use_caption
        self.t2s = DirectedReasoning(ps, f"{prefix}.t2s", d, d_att, heads) if use_t2s else None
        self.s2t = DirectedReasoning(ps, f"{prefix}.s2t", d, d_att, heads) if use_s2t else None
        self.audio = SingleStageReasoning(ps, f"{prefix}.q2a", d, d_att, heads) if use_audio else None
        self.caption = SingleStageReasoning(ps, f"{prefix}.q2c", d, d_att, heads) if use_caption else None
        n_components = sum([use_t2s, use_s2t, use_audio, use_caption])
        self.fusion = ModalityFusion(ps, f"{prefix}.fuse", d, n_components)

    def run(self, sources: ReasoningSources, query_repr: T.Tensor):
        trace = RoundTrace()
        components: list[T.Tensor] = []
        if self.t2s is not None:
            by_cell = T.permute(sources.video, (1, 0, 2))             # P x F x d
            z, trace.t2s = self.t2s.run(by_cell, query_repr)
            components.append(z)
        if self.s2t is not None:
            z, trace.s2t = self.s2t.run(sources.video, query_repr)    # F x P x d
            components.append(z)
        if self.audio is not None:
            z, trace.audio = self.audio.run(sources.audio, query_repr)
            components.append(z)
        if self.caption is not None:
            z, trace.caption = self.caption.run(
                sources.caption, query_repr, pad_mask=sources.caption_pad
            )
            components.append(z)
        fused, trace.fusion = self.fusion.run(query_repr, components)
        return fused, trace


class MultiRoundReasoning:
    """Stack of reasoning rounds; round r>1 is queried by round r-1's output."""

    def __init__(
        self,
        ps: ParameterSet,
        prefix: str,
        rounds: int,
        d: int,
        d_att: int,
        heads: int,
        use_t2s: bool = True,
        use_s2t: bool = True,
        use_audio: bool = True,
        use_caption: bool = True,
    ):
        if rounds < 1:
            raise ConfigError(f"need at least one reasoning round, got {rounds}")
        self.rounds = [
            ReasoningRound(
                ps, f"{prefix}.round{r}", d, d_att, heads,
                use_t2s, use_s2t, use_audio, use_caption,
            )
            for r in range(rounds)
        ]
        self._uses = (use_t2s or use_s2t, use_audio, use_caption)

    def run(self, sources: ReasoningSources, z_que: T.Tensor):
        sources.validate(*self._uses)
        query_repr = z_que
        traces: list[RoundTrace] = []
        for rnd in self.rounds:
            query_repr, trace = rnd.run(sources, query_repr)
            traces.append(trace)
        return query_repr, traces
