import numpy as np
import pytest

import vidial.tensor as T
from vidial.config import TrainConfig
from vidial.data import QAExample, SynthConfig, synthesize_qa, vocab_from_qa
from vidial.errors import ConfigError, ContractError, DataError
from vidial.qa import (
    AnswerVocabulary,
    QAModel,
    answer_inventory,
    count_loss,
    evaluate_choice,
    evaluate_count,
    evaluate_frame,
    frame_loss,
    hinge_loss,
    qa_example_loss,
    rounded_count,
    select_answer,
)
from vidial.vocab import UNK_TOKEN, Vocabulary, build_vocab

from helpers import check_gradients, rng


def tiny_cfg(**kw):
    base = dict(
        d=16, d_att=16, n_att=1, n_dec=1, h_att=2,
        d_pre_vis=8, d_pre_aud=4,
        use_audio=False, use_caption=False,
        task="qa-action", seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_vocab():
    return build_vocab([["what", "is", "shown", "?", "red", "blue", "square",
                         "circle", "<sep>", "how", "many", "times", "which",
                         "color", "flashes"]])


def video(seed=0, f=3, p=2, d=8):
    return rng(seed).normal(size=(f, p, d)).astype(np.float32)


# ---------------------------------------------------------------------------
# losses (pure functions first)


def scalar(x):
    return T.Tensor(np.array([[float(x)]]), requires_grad=True)


def test_hinge_zero_when_margin_met():
    loss = hinge_loss([scalar(2.0), scalar(0.5)], positive=0, margin=1.0)
    assert loss.data.item() == 0.0


def test_hinge_tied_scores_pay_full_margin():
    # two negatives tied with the positive: each term costs the margin
    loss = hinge_loss([scalar(1.0), scalar(1.0), scalar(1.0)], positive=0, margin=1.0)
    assert loss.data.item() == pytest.approx(2.0, abs=1e-12)


def test_hinge_mixed_hand_value():
    loss = hinge_loss([scalar(0.5), scalar(0.3), scalar(-0.2)], positive=1, margin=1.0)
    # max(0, 1-(0.3-0.5)) + max(0, 1-(0.3-(-0.2))) = 1.2 + 0.5
    assert loss.data.item() == pytest.approx(1.7, abs=1e-12)


def test_hinge_needs_a_negative():
    with pytest.raises(ContractError):
        hinge_loss([scalar(1.0)], positive=0)


def test_hinge_gradient_pushes_scores_apart():
    with T.GradientTape() as tape:
        pos, neg = scalar(0.2), scalar(0.1)
        loss = hinge_loss([pos, neg], positive=0, margin=1.0)
        T.backward(loss, tape)
    assert pos.grad.item() == -1.0
    assert neg.grad.item() == 1.0


def test_count_loss_value_and_gradient():
    with T.GradientTape() as tape:
        s = scalar(2.5)
        loss = count_loss(s, 4.0)
        T.backward(loss, tape)
    assert loss.data.item() == pytest.approx(2.25, abs=1e-12)
    assert s.grad.item() == pytest.approx(2 * (2.5 - 4.0), abs=1e-12)


def test_rounded_count_clamps_to_answer_range():
    assert rounded_count(-3.2) == 1
    assert rounded_count(2.4) == 2
    assert rounded_count(2.6) == 3
    assert rounded_count(99.0) == 10


def test_frame_loss_certain_answer_is_free():
    dist = T.Tensor(np.array([[1.0, 0.0, 0.0]]))
    assert frame_loss(dist, 0).data.item() == pytest.approx(0.0, abs=1e-12)


def test_frame_loss_hand_value():
    dist = T.Tensor(np.array([[0.25, 0.5, 0.25]]))
    assert frame_loss(dist, 1).data.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_frame_loss_slot_range():
    with pytest.raises(ContractError):
        frame_loss(T.Tensor(np.array([[1.0]])), 3)


# ---------------------------------------------------------------------------
# answer inventory


def test_answer_vocab_orders_and_unks():
    inv = AnswerVocabulary(["red", "blue", "red", "green"])
    assert inv.tokens[0] == UNK_TOKEN
    assert inv.tokens[1:] == ["blue", "green", "red"]
    assert inv.slot("green") == 2
    assert inv.unknown_seen == 0
    assert inv.slot("magenta") == 0
    assert inv.slot("teal") == 0
    assert inv.unknown_seen == 2


def test_answer_inventory_from_examples():
    exs = [
        QAExample("v0", "frame", ["q"], answer="red"),
        QAExample("v1", "frame", ["q"], answer="blue"),
    ]
    inv = answer_inventory(exs)
    assert len(inv) == 3


# ---------------------------------------------------------------------------
# strict selection


def test_select_answer_unique_max():
    assert select_answer([0.1, 0.9, 0.3]) == (1, False)


def test_select_answer_tie_is_no_answer():
    pick, tied = select_answer([0.5, 0.5, 0.1])
    assert pick is None and tied


def test_select_answer_shift_invariant():
    vals = [0.3, -1.2, 0.9, 0.9 - 1e-9]
    shifted = [v + 17.25 for v in vals]
    assert select_answer(vals)[0] == select_answer(shifted)[0]


# ---------------------------------------------------------------------------
# model structure


def test_qa_refuses_dialogue_task():
    with pytest.raises(ConfigError):
        QAModel(tiny_cfg(task="dialogue"), tiny_vocab())


def test_qa_requires_visual():
    with pytest.raises(ConfigError):
        QAModel(tiny_cfg(use_visual=False, use_caption=True), tiny_vocab())


def test_qa_fusion_has_exactly_two_components():
    model = QAModel(tiny_cfg(), tiny_vocab())
    w = model.params.state()["reason.round0.fuse.weight"]
    d = model.cfg.d
    assert w.shape == ((1 + 2) * d, 2)


def test_qa_has_no_audio_or_caption_paths():
    model = QAModel(tiny_cfg(), tiny_vocab())
    names = list(model.params.state())
    assert not any(".q2a." in n or ".q2c." in n for n in names)
    assert not any(n.startswith("adapt_aud") for n in names)


def test_probe_is_single_row_by_default():
    model = QAModel(tiny_cfg(), tiny_vocab())
    assert model.params.state()["qa.probe"].shape == (1, 16)


def test_probe_per_candidate_rows():
    model = QAModel(tiny_cfg(per_candidate_probe=True), tiny_vocab())
    assert model.params.state()["qa.probe"].shape[0] > 1


def test_score_is_scalar_and_finite():
    model = QAModel(tiny_cfg(), tiny_vocab())
    q = model.vocab.encode(["what", "is", "shown", "?"])
    c = model.vocab.encode(["red", "square"])
    s = model.candidate_score(q, c, video())
    assert s.shape == (1, 1)
    assert np.isfinite(s.data).all()


def test_empty_candidate_rejected():
    model = QAModel(tiny_cfg(), tiny_vocab())
    q = model.vocab.encode(["what", "?"])
    with pytest.raises(DataError):
        model.candidate_score(q, np.array([], dtype=np.int64), video())


def test_empty_question_rejected():
    model = QAModel(tiny_cfg(task="qa-count"), tiny_vocab())
    with pytest.raises(DataError):
        model.count_score(np.array([], dtype=np.int64), video())


def test_candidate_order_cannot_change_scores():
    model = QAModel(tiny_cfg(), tiny_vocab())
    q = model.vocab.encode(["what", "is", "shown", "?"])
    cands = [model.vocab.encode(c) for c in (["red", "square"], ["blue", "circle"], ["red", "circle"])]
    v = video(4)
    fwd = [s.data.item() for s in model.choice_scores(q, cands, v)]
    rev = [s.data.item() for s in model.choice_scores(q, cands[::-1], v)]
    assert fwd == rev[::-1]


def test_per_candidate_probe_breaks_symmetry():
    # identical candidates score identically with a shared probe but not
    # necessarily with per-candidate probes
    q_tokens = ["what", "is", "shown", "?"]
    cand = ["red", "square"]
    shared = QAModel(tiny_cfg(), tiny_vocab())
    q = shared.vocab.encode(q_tokens)
    c = shared.vocab.encode(cand)
    v = video(5)
    s = shared.choice_scores(q, [c, c], v)
    assert s[0].data.item() == s[1].data.item()
    per = QAModel(tiny_cfg(per_candidate_probe=True), tiny_vocab())
    s = per.choice_scores(q, [c, c], v)
    assert s[0].data.item() != s[1].data.item()


def test_candidate_limit_enforced():
    model = QAModel(tiny_cfg(per_candidate_probe=True), tiny_vocab())
    q = model.vocab.encode(["what", "?"])
    c = model.vocab.encode(["red"])
    with pytest.raises(ConfigError):
        model.candidate_score(q, c, video(), candidate_index=99)


def test_video_changes_score():
    model = QAModel(tiny_cfg(), tiny_vocab())
    q = model.vocab.encode(["what", "is", "shown", "?"])
    c = model.vocab.encode(["red", "square"])
    a = model.candidate_score(q, c, video(1)).data.item()
    b = model.candidate_score(q, c, video(2)).data.item()
    assert a != b


def test_frame_distribution_simplex():
    exs = [QAExample("v", "frame", ["q"], answer=a) for a in ("red", "blue", "green")]
    model = QAModel(tiny_cfg(task="qa-frame"), tiny_vocab(), answers=answer_inventory(exs))
    q = model.vocab.encode(["which", "color", "flashes", "?"])
    dist = model.frame_distribution(q, video())
    assert dist.shape == (1, 4)
    assert dist.data.sum() == pytest.approx(1.0, abs=1e-9)
    assert (dist.data > 0).all()


def test_frame_head_requires_inventory():
    with pytest.raises(ConfigError):
        QAModel(tiny_cfg(task="qa-frame"), tiny_vocab())


def test_count_task_has_no_frame_head():
    model = QAModel(tiny_cfg(task="qa-count"), tiny_vocab())
    assert "qa.frame" not in model.params.state()
    with pytest.raises(ConfigError):
        model.frame_distribution(model.vocab.encode(["q"]), video())


# ---------------------------------------------------------------------------
# gradients through the full QA graph


def test_count_gradients_reach_all_but_degenerate_attention():
    # probe input and separator history are single positions: their
    # attention weights are identically 1, so those score projections
    # never see gradient. Everything else must.
    model = QAModel(tiny_cfg(n_att=1, n_dec=1, task="qa-count"), tiny_vocab())
    q = model.vocab.encode(["how", "many", "times", "?"])
    with T.GradientTape() as tape:
        loss = count_loss(model.count_score(q, video(7)), 3.0)
        T.backward(loss, tape)
    dead = sorted(
        name for name, t in model.params.items()
        if t.grad is None or not np.any(t.grad)
    )
    assert dead == [
        "decoder.block0.history.key_proj",
        "decoder.block0.history.query_proj",
        "decoder.block0.self.key_proj",
        "decoder.block0.self.query_proj",
    ]


def test_hinge_gradients_reach_ranking_path():
    model = QAModel(tiny_cfg(n_att=1, n_dec=1), tiny_vocab())
    q = model.vocab.encode(["what", "is", "shown", "?"])
    cands = [model.vocab.encode(["red", "square"]), model.vocab.encode(["blue", "circle"])]
    v = video(7)
    with T.GradientTape() as tape:
        scores = model.choice_scores(q, cands, v)
        loss = hinge_loss(scores, 0, margin=5.0)  # wide margin keeps relu live
        T.backward(loss, tape)
    for name in ("embed.table", "adapt_vis.weight", "qa.probe", "qa.score",
                 "reason.round0.fuse.weight", "reason.round0.t2s.inner.key_proj"):
        t = dict(model.params.items())[name]
        assert t.grad is not None and np.any(t.grad), name


def test_count_score_numeric_gradient():
    model = QAModel(tiny_cfg(task="qa-count"), tiny_vocab())
    q = model.vocab.encode(["how", "many", "times", "?"])
    v = video(8)
    probe = model.params.tensors()[model.params.names().index("qa.probe")]

    def build():
        return count_loss(model.count_score(q, v), 3.0)

    worst = check_gradients(build, [probe, model.score_weight])
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# evaluation harness


class StubModel:
    """Duck-typed stand-in returning scripted scores."""

    def __init__(self, vocab, script):
        self.vocab = vocab
        self.script = script
        self.cfg = tiny_cfg()
        self.answers = None

    def choice_scores(self, q, cands, video):
        vals = self.script.pop(0)
        return [T.Tensor(np.array([[v]])) for v in vals]

    def count_score(self, q, video):
        return T.Tensor(np.array([[self.script.pop(0)]]))

    def frame_distribution(self, q, video):
        return T.Tensor(np.asarray([self.script.pop(0)]))


def _choice_examples(n):
    return [
        QAExample(f"v{i}", "action", ["q"], candidates=[["a"], ["b"], ["c"]], correct=1)
        for i in range(n)
    ]


def _feats(examples):
    return {ex.video_id: (video(), None) for ex in examples}


def test_evaluate_choice_strict_max_and_ties():
    exs = _choice_examples(4)
    model = StubModel(tiny_vocab(), [
        [0.1, 0.9, 0.2],    # correct
        [0.9, 0.9, 0.2],    # tie including correct -> miss
        [0.9, 0.1, 0.2],    # wrong
        [0.1, 0.8, 0.8],    # tie on wrong answers -> miss, counted
    ])
    rep = evaluate_choice(model, exs, _feats(exs))
    assert rep.accuracy == 0.25
    assert rep.ties == 2
    assert rep.total == 4


def test_evaluate_count_mse_and_rounding():
    exs = [
        QAExample("v0", "count", ["q"], count_label=3.0),
        QAExample("v1", "count", ["q"], count_label=1.0),
    ]
    model = StubModel(tiny_vocab(), [3.4, 0.2])
    rep = evaluate_count(model, exs, _feats(exs))
    assert rep.mse == pytest.approx(((3.4 - 3.0) ** 2 + (0.2 - 1.0) ** 2) / 2, abs=1e-12)
    assert rep.rounded_accuracy == 1.0  # 3.4 -> 3, 0.2 clamps up to 1


def test_evaluate_frame_counts_unknown_answers():
    exs = [
        QAExample("v0", "frame", ["q"], answer="red"),
        QAExample("v1", "frame", ["q"], answer="magenta"),
    ]
    model = StubModel(tiny_vocab(), [[0.1, 0.2, 0.7], [0.9, 0.05, 0.05]])
    model.answers = AnswerVocabulary(["red", "blue"])
    # slots: <unk>=0, blue=1, red=2
    rep = evaluate_frame(model, exs, _feats(exs))
    assert rep.accuracy == 1.0  # 0.7 at red's slot; unknown answer maps to slot 0
    assert rep.unknown_answers == 1


def test_qa_example_loss_dispatch():
    exs, feats = synthesize_qa(0, SynthConfig(dialogs=2, steps=4, cells=2, d_pre_vis=8), "action")
    vocab = vocab_from_qa(exs)
    model = QAModel(tiny_cfg(), vocab)
    loss = qa_example_loss(model, exs[0], feats)
    assert loss.shape == (1, 1)
    assert np.isfinite(loss.data).all()
