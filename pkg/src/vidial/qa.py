"""Video question answering on the shared reasoning backbone.

The dialogue architecture is reused with three changes: the query encodes
question (plus one answer candidate for choice tasks), the audio and
caption reasoning paths are dropped so fusion blends only the two video
directions, and the decoder reads a trainable probe vector instead of a
response prefix. A linear head on the probe's decoder state produces a
ranking score (choice tasks), a regression value (counting), or logits
over an answer inventory (single-token answers).

Choice tasks score each candidate independently, so candidate order can
never influence the result. Ranking trains with a margin loss; the strict
argmax used for accuracy treats exact ties as wrong answers and counts
them separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import Decoder
from .encoders import FeatureAdapter, TextEncoder, pool_video
from .errors import ConfigError, ContractError, DataError
from .params import ParameterSet
from .reasoning import MultiRoundReasoning, ReasoningSources
from .vocab import SEP_TOKEN, UNK_TOKEN, Vocabulary

# a probe table sized for per-candidate mode; plain mode uses row 0 only
CANDIDATE_LIMIT = 8


class AnswerVocabulary:
    """Closed answer inventory for single-token answer tasks.

    Slot 0 is the unknown slot; answers outside the inventory map there
    and are tallied so evaluation can report how often that happened.
    """

    def __init__(self, answers):
        seen = sorted(set(answers))
        if UNK_TOKEN in seen:
            seen.remove(UNK_TOKEN)
        self.tokens: list[str] = [UNK_TOKEN] + seen
        self._slots = {tok: i for i, tok in enumerate(self.tokens)}
        self.unknown_seen = 0

    @classmethod
    def from_tokens(cls, tokens) -> "AnswerVocabulary":
        """Rebuild from a stored slot list, preserving its exact order."""
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ContractError("answer inventory must start with the unknown slot")
        inv = cls.__new__(cls)
        inv.tokens = tokens
        inv._slots = {tok: i for i, tok in enumerate(tokens)}
        inv.unknown_seen = 0
        return inv

    def __len__(self) -> int:
        return len(self.tokens)

    def slot(self, token: str) -> int:
        idx = self._slots.get(token)
        if idx is None:
            self.unknown_seen += 1
            return 0
        return idx


class QAModel:
    """Question answering model: probe-decoded video reasoning plus a head."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary,
                 answers: AnswerVocabulary | None = None):
        cfg.validate()
        if cfg.task == "dialogue":
            raise ConfigError("QAModel requires a qa-* task")
        if not cfg.use_visual:
            raise ConfigError("question answering needs visual features enabled")
        if cfg.task == "qa-frame" and answers is None:
            raise ConfigError("qa-frame needs an answer inventory")
        self.cfg = cfg
        self.vocab = vocab
        self.answers = answers
        ps = ParameterSet(cfg.seed)
        self.params = ps
        d = cfg.d

        self.embedding = ps.matrix("embed.table", len(vocab), d)
        self.encoder = TextEncoder(
            self.embedding,
            ps.ones("encode.ln.gain", d),
            ps.zeros("encode.ln.bias", d),
        )
        self.video_adapter = FeatureAdapter(
            ps.matrix("adapt_vis.weight", cfg.d_pre_vis, d),
            ps.zeros("adapt_vis.bias", d),
            ps.ones("adapt_vis.ln.gain", d),
            ps.zeros("adapt_vis.ln.bias", d),
        )
        # question answering keeps only the two video reasoning directions
        self.reasoning = MultiRoundReasoning(
            ps, "reason", cfg.n_att, d, cfg.d_att, cfg.h_att,
            use_t2s=cfg.use_t2s,
            use_s2t=cfg.use_s2t,
            use_audio=False,
            use_caption=False,
        )
        self.decoder = Decoder(ps, "decoder", cfg.n_dec, d, cfg.d_att, cfg.h_att)
        probe_rows = CANDIDATE_LIMIT if cfg.per_candidate_probe else 1
        self.probe = ps.matrix("qa.probe", probe_rows, d)
        self.score_weight = ps.matrix("qa.score", d, 1)
        self.frame_weight = None
        if cfg.task == "qa-frame":
            self.frame_weight = ps.matrix("qa.frame", d, len(answers))

        self._history_ids = vocab.encode([SEP_TOKEN])

    # -- shared trunk --------------------------------------------------------

    def _decode_probe(self, query_ids: np.ndarray, video: np.ndarray,
                      probe_row: int) -> T.Tensor:
        if query_ids.size == 0:
            raise DataError("empty question")
        que = self.encoder.encode(query_ids)
        his = self.encoder.encode(self._history_ids)
        feats = self.video_adapter.adapt(pool_video(T.Tensor(video), self.cfg.pool_mode))
        sources = ReasoningSources(video=feats, audio=None, caption=None)
        z_vid, _ = self.reasoning.run(sources, que.z)
        probe = T.embedding_rows(self.probe, np.array([probe_row], dtype=np.int64))
        z_dec, _ = self.decoder.run(probe, his.z, que.z, z_vid,
                                    que_pad=que.pad_mask if que.pad_mask.any() else None)
        return z_dec                                              # 1 x d

    def _probe_row(self, candidate_index: int) -> int:
        if not self.cfg.per_candidate_probe:
            return 0
        if candidate_index >= CANDIDATE_LIMIT:
            raise ConfigError(
                f"per-candidate probes support at most {CANDIDATE_LIMIT} candidates"
            )
        return candidate_index

    # -- task heads -----------------------------------------------------------

    def candidate_score(self, question_ids: np.ndarray, candidate_ids: np.ndarray,
                        video: np.ndarray, candidate_index: int = 0) -> T.Tensor:
        """Ranking score for one candidate answer; returns a 1x1 tensor."""
        if candidate_ids.size == 0:
            raise DataError("empty answer candidate")
        query = np.concatenate([question_ids, candidate_ids]).astype(np.int64)
        z_dec = self._decode_probe(query, video, self._probe_row(candidate_index))
        return T.matmul(z_dec, self.score_weight)

    def choice_scores(self, question_ids: np.ndarray,
                      candidates: list[np.ndarray], video: np.ndarray) -> list[T.Tensor]:
        if not candidates:
            raise DataError("choice task needs at least one candidate")
        return [
            self.candidate_score(question_ids, cand, video, candidate_index=i)
            for i, cand in enumerate(candidates)
        ]

    def count_score(self, question_ids: np.ndarray, video: np.ndarray) -> T.Tensor:
        z_dec = self._decode_probe(question_ids, video, 0)
        return T.matmul(z_dec, self.score_weight)

    def frame_distribution(self, question_ids: np.ndarray, video: np.ndarray) -> T.Tensor:
        if self.frame_weight is None:
            raise ConfigError("model was not built for the frame task")
        z_dec = self._decode_probe(question_ids, video, 0)
        return T.softmax(T.matmul(z_dec, self.frame_weight), axis=-1)


# ---------------------------------------------------------------------------
# losses


def hinge_loss(scores: list[T.Tensor], positive: int, margin: float = 1.0) -> T.Tensor:
    """Sum over negatives of max(0, margin - (positive - negative))."""
    if not 0 <= positive < len(scores):
        raise ContractError(f"positive index {positive} outside {len(scores)} scores")
    if len(scores) < 2:
        raise ContractError("ranking loss needs at least one negative candidate")
    pos = scores[positive]
    total = None
    for i, neg in enumerate(scores):
        if i == positive:
            continue
        term = T.relu(T.sub(float(margin), T.sub(pos, neg)))
        total = term if total is None else T.add(total, term)
    return total


def count_loss(score: T.Tensor, label: float) -> T.Tensor:
    """Squared error of the scalar regression head."""
    diff = T.sub(score, float(label))
    return T.mul(diff, diff)


def rounded_count(value: float) -> int:
    """Regression output folded to the countable range."""
    return int(np.clip(np.rint(value), 1, 10))


def frame_loss(dist: T.Tensor, slot: int) -> T.Tensor:
    """Negative log-likelihood of the answer slot."""
    n = dist.shape[-1]
    if not 0 <= slot < n:
        raise ContractError(f"answer slot {slot} outside inventory of {n}")
    pick = np.zeros((n, 1))
    pick[slot, 0] = 1.0
    return T.neg(T.matmul(T.log_clamped(dist), T.Tensor(pick)))


# ---------------------------------------------------------------------------
# evaluation


def select_answer(values: list[float]) -> tuple[int | None, bool]:
    """Strict argmax: None when the maximum is shared (a tie is a miss)."""
    best = max(values)
    winners = [i for i, v in enumerate(values) if v == best]
    if len(winners) > 1:
        return None, True
    return winners[0], False


@dataclass
class ChoiceReport:
    accuracy: float
    ties: int
    total: int


@dataclass
class CountReport:
    mse: float
    rounded_accuracy: float
    total: int


@dataclass
class FrameReport:
    accuracy: float
    unknown_answers: int
    total: int


def evaluate_choice(model: QAModel, examples, features: Mapping) -> ChoiceReport:
    correct = ties = 0
    for ex in examples:
        video = features[ex.video_id][0]
        question = model.vocab.encode(ex.question)
        cands = [model.vocab.encode(c) for c in ex.candidates]
        scores = [s.data.item() for s in model.choice_scores(question, cands, video)]
        pick, tied = select_answer(scores)
        ties += int(tied)
        correct += int(pick == ex.correct)
    n = len(examples)
    return ChoiceReport(accuracy=correct / n, ties=ties, total=n)


def evaluate_count(model: QAModel, examples, features: Mapping) -> CountReport:
    se = 0.0
    hits = 0
    for ex in examples:
        video = features[ex.video_id][0]
        question = model.vocab.encode(ex.question)
        value = model.count_score(question, video).data.item()
        se += (value - ex.count_label) ** 2
        hits += int(rounded_count(value) == int(round(ex.count_label)))
    n = len(examples)
    return CountReport(mse=se / n, rounded_accuracy=hits / n, total=n)


def evaluate_frame(model: QAModel, examples, features: Mapping) -> FrameReport:
    assert model.answers is not None
    before = model.answers.unknown_seen
    correct = 0
    for ex in examples:
        video = features[ex.video_id][0]
        question = model.vocab.encode(ex.question)
        dist = model.frame_distribution(question, video).data[0]
        pick, tied = select_answer(list(dist))
        want = model.answers.slot(ex.answer)
        correct += int(not tied and pick == want)
    n = len(examples)
    return FrameReport(
        accuracy=correct / n,
        unknown_answers=model.answers.unknown_seen - before,
        total=n,
    )


def answer_inventory(examples) -> AnswerVocabulary:
    """Collect the single-token answers observed in a training split."""
    inv = AnswerVocabulary([ex.answer for ex in examples if ex.answer])
    return inv


def qa_example_loss(model: QAModel, ex, features: Mapping) -> T.Tensor:
    """Dispatch one example to its task's loss (used by the training loop)."""
    video = features[ex.video_id][0]
    question = model.vocab.encode(ex.question)
    task = model.cfg.task
    if task in ("qa-action", "qa-transition"):
        cands = [model.vocab.encode(c) for c in ex.candidates]
        scores = model.choice_scores(question, cands, video)
        return hinge_loss(scores, ex.correct, margin=model.cfg.margin)
    if task == "qa-count":
        return count_loss(model.count_score(question, video), ex.count_label)
    if task == "qa-frame":
        dist = model.frame_distribution(question, video)
        return frame_loss(dist, model.answers.slot(ex.answer))
    raise ConfigError(f"task {task!r} has no example loss")
