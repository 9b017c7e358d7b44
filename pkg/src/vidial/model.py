"""End-to-end dialogue response model: encoders -> reasoning -> decoder -> output.

One example is processed at a time (sequences are never padded into a
batch tensor); training batches are formed by accumulating gradients over
examples before each optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import BlockTrace, Decoder
from .encoders import EncodedText, FeatureAdapter, TextEncoder, pool_video, shift_target
from .errors import DataError
from .generator import Generator, OutputDistribution, beam_search, generation_loss, greedy_decode
from .params import ParameterSet
from .reasoning import MultiRoundReasoning, ReasoningSources, RoundTrace
from .vocab import EOS, SOS, Vocabulary


@dataclass
class ModelInputs:
    """Raw per-turn inputs: token id arrays plus optional feature arrays."""

    history: np.ndarray
    query: np.ndarray
    caption: np.ndarray
    video: np.ndarray | None = None   # F x P x d_pre_vis
    audio: np.ndarray | None = None   # F x d_pre_aud


@dataclass
class ForwardResult:
    output: OutputDistribution
    z_dec: T.Tensor
    z_vid: T.Tensor
    reasoning: list[RoundTrace]
    decoder: list[BlockTrace]

    def score_tensors(self) -> list[T.Tensor]:
        out: list[T.Tensor] = []
        for rt in self.reasoning:
            out.extend(rt.score_tensors())
        for bt in self.decoder:
            out.extend(bt.score_tensors())
        out.extend(self.output.score_tensors())
        return out


class ResponseModel:
    """Dialogue response generation with bidirectional video reasoning."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        ps = ParameterSet(cfg.seed)
        self.params = ps
        d = cfg.d

        self.embedding = ps.matrix("embed.table", len(vocab), d)
        self.encoder = TextEncoder(
            self.embedding,
            ps.ones("encode.ln.gain", d),
            ps.zeros("encode.ln.bias", d),
        )
        self.video_adapter = None
        self.audio_adapter = None
        if cfg.use_visual:
            self.video_adapter = FeatureAdapter(
                ps.matrix("adapt_vis.weight", cfg.d_pre_vis, d),
                ps.zeros("adapt_vis.bias", d),
                ps.ones("adapt_vis.ln.gain", d),
                ps.zeros("adapt_vis.ln.bias", d),
            )
        if cfg.use_audio:
            self.audio_adapter = FeatureAdapter(
                ps.matrix("adapt_aud.weight", cfg.d_pre_aud, d),
                ps.zeros("adapt_aud.bias", d),
                ps.ones("adapt_aud.ln.gain", d),
                ps.zeros("adapt_aud.ln.bias", d),
            )
        self.reasoning = MultiRoundReasoning(
            ps, "reason", cfg.n_att, d, cfg.d_att, cfg.h_att,
            use_t2s=cfg.use_visual and cfg.use_t2s,
            use_s2t=cfg.use_visual and cfg.use_s2t,
            use_audio=cfg.use_audio,
            use_caption=cfg.use_caption,
        )
        self.decoder = Decoder(ps, "decoder", cfg.n_dec, d, cfg.d_att, cfg.h_att)
        self.generator = Generator(ps, "generator", d, self.embedding)

    # -- encoding ----------------------------------------------------------

    def _adapt_video(self, video: np.ndarray) -> T.Tensor:
        # pool raw features, pre-adapter: the collapsed axis must never be
        # recoverable downstream, and the adapter's relu is not mean-preserving
        feats = pool_video(T.Tensor(video), self.cfg.pool_mode)
        return self.video_adapter.adapt(feats)

    def encode_inputs(self, inputs: ModelInputs):
        his = self.encoder.encode(inputs.history)
        que = self.encoder.encode(inputs.query)
        cap = self.encoder.encode(inputs.caption)
        video = audio = None
        if self.cfg.use_visual:
            if inputs.video is None:
                raise DataError("configuration expects video features, none supplied")
            video = self._adapt_video(inputs.video)
        if self.cfg.use_audio:
            if inputs.audio is None:
                raise DataError("configuration expects audio features, none supplied")
            audio = self.audio_adapter.adapt(T.Tensor(inputs.audio))
        sources = ReasoningSources(
            video=video, audio=audio, caption=cap.z, caption_pad=cap.pad_mask
        )
        return his, que, cap, sources

    # -- training-time forward ----------------------------------------------

    def forward(self, inputs: ModelInputs, response_input: np.ndarray) -> ForwardResult:
        his, que, cap, sources = self.encode_inputs(inputs)
        z_vid, r_traces = self.reasoning.run(sources, que.z)
        res = self.encoder.encode(response_input)
        z_dec, d_traces = self.decoder.run(
            res.z, his.z, que.z, z_vid,
            his_pad=his.pad_mask if his.pad_mask.any() else None,
            que_pad=que.pad_mask if que.pad_mask.any() else None,
        )
        out = self.generator.run(z_dec, res.z, que, cap)
        return ForwardResult(out, z_dec, z_vid, r_traces, d_traces)

    def loss(self, inputs: ModelInputs, response_ids: np.ndarray,
             smoothing: float | None = None) -> T.Tensor:
        """Teacher-forced loss for one full response sequence."""
        dec_input, labels = shift_target(response_ids)
        result = self.forward(inputs, dec_input)
        eps = self.cfg.label_smoothing if smoothing is None else smoothing
        return generation_loss(result.output.p_out, labels, smoothing=eps)

    # -- decoding ------------------------------------------------------------

    def step_fn(self, inputs: ModelInputs):
        """Next-token log-prob callback over a growing prefix."""
        his, que, cap, sources = self.encode_inputs(inputs)
        z_vid, _ = self.reasoning.run(sources, que.z)
        his_pad = his.pad_mask if his.pad_mask.any() else None
        que_pad = que.pad_mask if que.pad_mask.any() else None

        def step(tokens: list[int]) -> np.ndarray:
            res = self.encoder.encode(np.asarray(tokens, dtype=np.int64))
            z_dec, _ = self.decoder.run(res.z, his.z, que.z, z_vid,
                                        his_pad=his_pad, que_pad=que_pad)
            out = self.generator.run(z_dec, res.z, que, cap)
            return np.log(np.maximum(out.p_out.data[-1], 1e-300))

        return step

    def generate(self, inputs: ModelInputs, beam_size: int | None = None,
                 max_len: int | None = None) -> list[int]:
        """Decode a response; returns generated ids (end token included if hit)."""
        beam = self.cfg.beam_size if beam_size is None else beam_size
        limit = self.cfg.max_len if max_len is None else max_len
        return beam_search(self.step_fn(inputs), SOS, EOS, beam, limit)

    def greedy(self, inputs: ModelInputs, max_len: int | None = None) -> list[int]:
        limit = self.cfg.max_len if max_len is None else max_len
        return greedy_decode(self.step_fn(inputs), SOS, EOS, limit)


def dialogue_items(records, features, vocab: Vocabulary) -> list[tuple[ModelInputs, np.ndarray]]:
    """Flatten dialogue records into per-turn (inputs, target) pairs."""
    from .data import turn_arrays

    items = []
    for rec in records:
        video, audio = features[rec.video_id]
        for t in range(len(rec.turns)):
            hist, query, caption, target = turn_arrays(rec, t, vocab)
            items.append((ModelInputs(hist, query, caption, video, audio), target))
    return items
