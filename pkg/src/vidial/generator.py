"""Output layer: tied vocabulary projection, two pointer paths, blending.

Each decoder position produces three row-stochastic distributions over the
vocabulary — a softmax over tied embedding logits, and one pointer
distribution each over the query and the caption — combined by per-position
blend weights learned from the decoder state. Tokens that appear in a
source can therefore be emitted even if the vocabulary path alone would
never rank them first.

Also hosts greedy and beam decoding over an abstract next-token
log-probability callback, so search behavior is testable on tiny
enumerable models.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import padding_bias
from .encoders import EncodedText
from .errors import ConfigError, ContractError, NumericWarning
from .params import ParameterSet
from .vocab import PAD

PROB_FLOOR = 1e-12


class PointerHead:
    """Single-head dot-product attention whose mass lands in vocab slots."""

    def __init__(self, ps: ParameterSet, prefix: str, d: int):
        self.query_proj = ps.matrix(f"{prefix}.query_proj", d, d)
        self.key_proj = ps.matrix(f"{prefix}.key_proj", d, d)
        self.d = d

    def run(self, source: EncodedText, z_dec: T.Tensor, vocab_size: int):
        q = T.matmul(z_dec, self.query_proj)
        k = T.matmul(source.z, self.key_proj)
        logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.d))
        if source.pad_mask.any():
            logits = T.add(logits, T.Tensor(padding_bias(source.pad_mask)))
        weights = T.softmax(logits, axis=-1)
        dist = T.pointer_scatter(weights, source.tokens, vocab_size)
        return dist, weights


@dataclass
class OutputDistribution:
    """Per-position blended output with its ingredients kept for inspection."""

    p_out: T.Tensor           # j x |V|
    p_vocab: T.Tensor         # j x |V|
    pointer_query: T.Tensor   # j x |V|
    pointer_caption: T.Tensor # j x |V|
    alpha: T.Tensor           # j x 3
    query_weights: T.Tensor   # j x L_que
    caption_weights: T.Tensor # j x L_cap

    def score_tensors(self) -> list[T.Tensor]:
        return [self.p_out, self.p_vocab, self.alpha,
                self.query_weights, self.caption_weights]


def _masked_mean_rows(encoded: EncodedText) -> T.Tensor:
    """Mean over non-pad rows, as a 1 x d tensor."""
    keep = ~encoded.pad_mask
    coeff = np.where(keep, 1.0 / keep.sum(), 0.0)[None, :]
    return T.matmul(T.Tensor(coeff), encoded.z)


class Generator:
    """Vocabulary + pointer distributions and their learned blend."""

    def __init__(self, ps: ParameterSet, prefix: str, d: int, embedding: T.Tensor):
        self.embedding = embedding        # the text encoders' table, same object
        self.query_pointer = PointerHead(ps, f"{prefix}.point_query", d)
        self.caption_pointer = PointerHead(ps, f"{prefix}.point_caption", d)
        self.blend_weight = ps.matrix(f"{prefix}.blend", 4 * d, 3)

    def vocab_distribution(self, z_dec: T.Tensor) -> T.Tensor:
        logits = T.matmul(z_dec, T.transpose(self.embedding))
        return T.softmax(logits, axis=-1)

    def run(
        self,
        z_dec: T.Tensor,
        z_res: T.Tensor,
        query: EncodedText,
        caption: EncodedText,
    ) -> OutputDistribution:
        vocab_size = self.embedding.shape[0]
        steps, d = z_dec.shape

        p_vocab = self.vocab_distribution(z_dec)
        ptr_que, w_que = self.query_pointer.run(query, z_dec, vocab_size)
        ptr_cap, w_cap = self.caption_pointer.run(caption, z_dec, vocab_size)

        que_summary = T.tile_rows(T.reshape(_masked_mean_rows(query), (d,)), steps)
        cap_summary = T.tile_rows(T.reshape(_masked_mean_rows(caption), (d,)), steps)
        z_gen = T.concat([z_res, z_dec, que_summary, cap_summary], axis=1)
        alpha = T.softmax(T.matmul(z_gen, self.blend_weight), axis=-1)

        stacked = T.concat(
            [T.reshape(p, (1, steps, vocab_size)) for p in (p_vocab, ptr_que, ptr_cap)],
            axis=0,
        )
        col = T.reshape(T.permute(alpha, (1, 0)), (3, steps, 1))
        p_out = T.reduce_sum(T.mul(stacked, col), axis=0)
        return OutputDistribution(p_out, p_vocab, ptr_que, ptr_cap, alpha, w_que, w_cap)


def generation_loss(p_out: T.Tensor, labels: np.ndarray, smoothing: float = 0.1) -> T.Tensor:
    """Cross-entropy per non-pad position, averaged.

    With smoothing e, the target puts 1-e on the gold token and e/(|V|-1)
    on every other slot. Gold probabilities at or below the floor are
    clamped (the log op handles it) and reported via a warning, since they
    starve the gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    steps, vocab_size = p_out.shape
    if labels.shape != (steps,):
        raise ContractError(f"{labels.shape[0]} labels for {steps} positions")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {smoothing}")
    live = labels != PAD
    count = int(live.sum())
    if count == 0:
        raise ContractError("no non-pad label positions to score")

    gold = p_out.data[np.arange(steps), labels]
    if (gold[live] <= PROB_FLOOR).any():
        warnings.warn(
            "gold-token probability clamped at the floor; pointer-only tokens "
            "may be unreachable from the current sources",
            NumericWarning,
        )

    target = np.zeros((steps, vocab_size))
    off = smoothing / (vocab_size - 1)
    target[live] = off
    target[np.arange(steps)[live], labels[live]] = 1.0 - smoothing
    logp = T.log_clamped(p_out, floor=PROB_FLOOR)
    return T.scale(T.reduce_sum(T.mul(logp, T.Tensor(target))), -1.0 / count)


StepFn = Callable[[list[int]], np.ndarray]
# maps a generated-so-far token list (starting with the start token) to a
# log-probability row over the vocabulary for the next position


def greedy_decode(step_fn: StepFn, start: int, end: int, max_len: int) -> list[int]:
    """Step-wise argmax decoding; returns generated ids ending at `end` if hit."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    tokens = [start]
    for _ in range(max_len):
        nxt = int(np.argmax(step_fn(tokens)))
        tokens.append(nxt)
        if nxt == end:
            break
    return tokens[1:]


@dataclass
class _Hypothesis:
    tokens: list[int]
    logp: float
    done: bool

    def score(self) -> float:
        produced = len(self.tokens) - 1
        return self.logp / max(produced, 1)


def beam_search(
    step_fn: StepFn,
    start: int,
    end: int,
    beam_size: int,
    max_len: int,
) -> list[int]:
    """Length-normalized beam search; beam_size=1 reduces to greedy.

    Ties rank lower token index first, so results are deterministic.
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")

    beams = [_Hypothesis([start], 0.0, False)]
    for _ in range(max_len):
        candidates: list[_Hypothesis] = []
        for hyp in beams:
            if hyp.done:
                candidates.append(hyp)
                continue
            logrow = np.asarray(step_fn(hyp.tokens), dtype=np.float64)
            for tok in range(logrow.shape[0]):
                candidates.append(
                    _Hypothesis(hyp.tokens + [tok], hyp.logp + float(logrow[tok]), tok == end)
                )
        # stable sort: ties keep expansion order (lower token index first)
        candidates.sort(key=lambda h: -h.score())
        beams = candidates[:beam_size]
        if all(h.done for h in beams):
            break
    best = max(beams, key=lambda h: h.score())
    return best.tokens[1:]
