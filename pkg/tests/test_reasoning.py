"""Bidirectional reasoning stack against loop oracles and symmetry checks."""

import numpy as np
import pytest

from vidial import tensor as T
from vidial.errors import ConfigError, DataError
from vidial.params import ParameterSet
from vidial.reasoning import (
    DirectedReasoning,
    ModalityFusion,
    MultiRoundReasoning,
    ReasoningSources,
    SingleStageReasoning,
)

from helpers import rng
from oracles import loop_directed, loop_fusion, loop_single_stage, stage_weights


def make_directed(d=4, d_att=4, heads=1, seed=0):
    ps = ParameterSet(seed)
    dr = DirectedReasoning(ps, "dir", d, d_att, heads)
    # non-degenerate norm parameters so the oracle exercises them too
    g = rng(seed + 1)
    dr.inner_stage.ln_gain.data[:] = 1.0 + 0.2 * g.normal(size=d)
    dr.outer_stage.ln_gain.data[:] = 1.0 + 0.2 * g.normal(size=d)
    dr.inner_stage.ln_bias.data[:] = 0.1 * g.normal(size=d)
    return ps, dr


def sources_only_video(video: np.ndarray) -> ReasoningSources:
    return ReasoningSources(video=T.Tensor(video), audio=None, caption=None)


# ---------------------------------------------------------------------------
# directed two-stage reasoning


def test_single_inner_step_gets_full_attention():
    # inner extent 1: every attention row is the single value 1.0 exactly
    ps, dr = make_directed()
    g = rng(2)
    feats = T.Tensor(g.normal(size=(3, 1, 4)))   # outer=3, inner=1
    que = T.Tensor(g.normal(size=(2, 4)))
    _, (w1, _) = dr.run(feats, que)
    assert w1.shape == (3, 1, 2, 1)
    assert np.array_equal(w1.data, np.ones_like(w1.data))


def test_single_outer_slice_gets_full_attention():
    ps, dr = make_directed()
    g = rng(3)
    feats = T.Tensor(g.normal(size=(1, 5, 4)))   # outer=1
    que = T.Tensor(g.normal(size=(3, 4)))
    _, (_, w2) = dr.run(feats, que)
    assert w2.shape == (3, 1, 1, 1)
    assert np.array_equal(w2.data, np.ones_like(w2.data))


def test_identical_inner_rows_give_uniform_scores():
    ps, dr = make_directed()
    g = rng(4)
    one = g.normal(size=4)
    feats = T.Tensor(np.broadcast_to(one, (2, 4, 4)).copy())  # inner rows all equal
    que = T.Tensor(g.normal(size=(3, 4)))
    _, (w1, w2) = dr.run(feats, que)
    np.testing.assert_allclose(w1.data, 0.25, atol=1e-12)
    # inner outputs are then also identical per token, so stage 2 is uniform
    np.testing.assert_allclose(w2.data, 0.5, atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_directed_matches_loop_oracle(heads, seed):
    d = d_att = 4
    ps, dr = make_directed(d, d_att, heads, seed=seed)
    g = rng(50 + seed)
    feats = g.normal(size=(2, 2, d))             # outer x inner x d
    que = g.normal(size=(2, d))
    got, _ = dr.run(T.Tensor(feats), T.Tensor(que))
    want = loop_directed(
        feats, que, stage_weights(dr.inner_stage), stage_weights(dr.outer_stage), heads
    )
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_directed_oracle_at_mixed_extents(seed):
    d, d_att, heads = 6, 6, 3
    ps = ParameterSet(seed)
    dr = DirectedReasoning(ps, "dir", d, d_att, heads)
    g = rng(80 + seed)
    feats = g.normal(size=(5, 3, d))
    que = g.normal(size=(4, d))
    got, _ = dr.run(T.Tensor(feats), T.Tensor(que))
    want = loop_directed(
        feats, que, stage_weights(dr.inner_stage), stage_weights(dr.outer_stage), heads
    )
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-10)


def test_outer_axis_permutation_leaves_output_unchanged():
    # the outer weighted sum absorbs any reordering of outer slices
    ps, dr = make_directed(d=4, d_att=4, heads=2, seed=5)
    g = rng(60)
    feats = g.normal(size=(4, 3, 4))
    que = T.Tensor(g.normal(size=(3, 4)))
    base, _ = dr.run(T.Tensor(feats), que)
    perm = g.permutation(4)
    shuffled, _ = dr.run(T.Tensor(feats[perm]), que)
    np.testing.assert_allclose(shuffled.data, base.data, rtol=0, atol=1e-9)


def test_inner_axis_permutation_permutes_stage1_scores():
    ps, dr = make_directed(d=4, d_att=4, heads=1, seed=6)
    g = rng(61)
    feats = g.normal(size=(2, 5, 4))
    que = T.Tensor(g.normal(size=(3, 4)))
    out_a, (w_a, _) = dr.run(T.Tensor(feats), que)
    perm = g.permutation(5)
    out_b, (w_b, _) = dr.run(T.Tensor(feats[:, perm, :]), que)
    np.testing.assert_allclose(w_b.data, w_a.data[:, :, :, perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out_b.data, out_a.data, rtol=0, atol=1e-9)


def test_direction_swap_equals_axis_swap_with_tied_weights():
    d, d_att, heads = 4, 4, 2
    ps_a = ParameterSet(7)
    dr_a = DirectedReasoning(ps_a, "a", d, d_att, heads)
    ps_b = ParameterSet(8)
    dr_b = DirectedReasoning(ps_b, "b", d, d_att, heads)
    for src, dst in ((dr_a.inner_stage, dr_b.inner_stage), (dr_a.outer_stage, dr_b.outer_stage)):
        for name in ("key_proj", "query_proj", "ff_weight", "ff_bias", "ln_gain", "ln_bias"):
            getattr(dst, name).data[...] = getattr(src, name).data
    g = rng(62)
    video = g.normal(size=(3, 5, d))             # steps x cells x d
    que = T.Tensor(g.normal(size=(2, d)))
    one_way, _ = dr_a.run(T.Tensor(video.transpose(1, 0, 2)), que)
    other_way, _ = dr_b.run(T.Tensor(video.transpose(1, 0, 2)), que)
    assert np.array_equal(one_way.data, other_way.data)


# ---------------------------------------------------------------------------
# single-stage (audio / caption) reasoning


def make_single(d=4, d_att=4, heads=1, seed=0):
    ps = ParameterSet(seed)
    return ps, SingleStageReasoning(ps, "single", d, d_att, heads)


def test_single_source_row_is_copied_everywhere():
    ps, ss = make_single()
    g = rng(9)
    src = T.Tensor(g.normal(size=(1, 4)))
    que = T.Tensor(g.normal(size=(3, 4)))
    _, w = ss.run(src, que)
    assert np.array_equal(w.data, np.ones_like(w.data))


def test_identical_source_rows_uniform_weights():
    ps, ss = make_single()
    g = rng(10)
    src = T.Tensor(np.tile(g.normal(size=4), (5, 1)))
    que = T.Tensor(g.normal(size=(2, 4)))
    _, w = ss.run(src, que)
    np.testing.assert_allclose(w.data, 0.2, atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2])
def test_single_stage_matches_loop_oracle(heads):
    ps, ss = make_single(d=4, d_att=4, heads=heads, seed=11)
    g = rng(12)
    src = g.normal(size=(5, 4))
    que = g.normal(size=(3, 4))
    got, _ = ss.run(T.Tensor(src), T.Tensor(que))
    want = loop_single_stage(src, que, stage_weights(ss.stage), heads)
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-10)


def test_padded_source_rows_get_exact_zero_weight():
    ps, ss = make_single(seed=13)
    g = rng(14)
    src = T.Tensor(g.normal(size=(4, 4)))
    que = T.Tensor(g.normal(size=(2, 4)))
    pad = np.array([False, False, True, True])
    _, w = ss.run(src, que, pad_mask=pad)
    assert (w.data[..., 2:] == 0.0).all()
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


def test_fully_padded_source_rejected():
    ps, ss = make_single()
    g = rng(15)
    with pytest.raises(Exception):
        ss.run(T.Tensor(g.normal(size=(2, 4))), T.Tensor(g.normal(size=(2, 4))),
               pad_mask=np.array([True, True]))


# ---------------------------------------------------------------------------
# fusion


def test_fusion_convexity_identical_components():
    ps = ParameterSet(16)
    fusion = ModalityFusion(ps, "fuse", d=4, n_components=3)
    g = rng(17)
    que = T.Tensor(g.normal(size=(3, 4)))
    common = g.normal(size=(3, 4))
    fused, scores = fusion.run(que, [T.Tensor(common.copy()) for _ in range(3)])
    np.testing.assert_allclose(fused.data, common, rtol=0, atol=1e-12)
    np.testing.assert_allclose(scores.data.sum(axis=-1), 1.0, atol=1e-9)


def test_fusion_zero_weight_means_plain_average():
    ps = ParameterSet(18)
    fusion = ModalityFusion(ps, "fuse", d=4, n_components=4)
    fusion.weight.data[...] = 0.0
    g = rng(19)
    que = T.Tensor(g.normal(size=(2, 4)))
    comps = [g.normal(size=(2, 4)) for _ in range(4)]
    fused, scores = fusion.run(que, [T.Tensor(c) for c in comps])
    np.testing.assert_allclose(scores.data, 0.25, atol=1e-15)
    np.testing.assert_allclose(fused.data, np.mean(comps, axis=0), rtol=0, atol=1e-12)


def test_fusion_matches_direct_formula_oracle():
    ps = ParameterSet(20)
    fusion = ModalityFusion(ps, "fuse", d=5, n_components=4)
    g = rng(21)
    que = g.normal(size=(3, 5))
    comps = [g.normal(size=(3, 5)) for _ in range(4)]
    fused, scores = fusion.run(T.Tensor(que), [T.Tensor(c) for c in comps])
    want_fused, want_scores = loop_fusion(que, comps, fusion.weight.data)
    np.testing.assert_allclose(fused.data, want_fused, rtol=0, atol=1e-12)
    np.testing.assert_allclose(scores.data, want_scores, rtol=0, atol=1e-12)


def test_fusion_rejects_wrong_component_count():
    ps = ParameterSet(22)
    fusion = ModalityFusion(ps, "fuse", d=4, n_components=2)
    que = T.Tensor(np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        fusion.run(que, [que])
    with pytest.raises(ConfigError):
        ModalityFusion(ps, "fuse2", d=4, n_components=0)


# ---------------------------------------------------------------------------
# full rounds


def full_sources(g, f=3, p=2, d=4, l_cap=4) -> ReasoningSources:
    return ReasoningSources(
        video=T.Tensor(g.normal(size=(f, p, d))),
        audio=T.Tensor(g.normal(size=(f, d))),
        caption=T.Tensor(g.normal(size=(l_cap, d))),
        caption_pad=np.zeros(l_cap, dtype=bool),
    )


def test_round_produces_simplex_scores_everywhere():
    ps = ParameterSet(23)
    mr = MultiRoundReasoning(ps, "reason", rounds=2, d=4, d_att=4, heads=2)
    g = rng(24)
    que = T.Tensor(g.normal(size=(3, 4)))
    out, traces = mr.run(full_sources(g), que)
    assert out.shape == (3, 4)
    assert len(traces) == 2
    checked = 0
    for trace in traces:
        for w in trace.score_tensors():
            sums = w.data.sum(axis=-1)
            np.testing.assert_allclose(sums, np.ones_like(sums), rtol=0, atol=1e-9)
            checked += 1
    assert checked == 2 * 7  # 2x directed pairs + audio + caption + fusion, per round


def test_multi_round_is_composition_of_rounds():
    ps = ParameterSet(25)
    mr = MultiRoundReasoning(ps, "reason", rounds=2, d=4, d_att=4, heads=1)
    g = rng(26)
    src = full_sources(g)
    que = T.Tensor(g.normal(size=(2, 4)))
    combined, _ = mr.run(src, que)
    first, _ = mr.rounds[0].run(src, que)
    second, _ = mr.rounds[1].run(src, first)
    assert np.array_equal(combined.data, second.data)


def test_rounds_do_not_share_parameters():
    ps = ParameterSet(27)
    MultiRoundReasoning(ps, "reason", rounds=3, d=4, d_att=4, heads=1)
    names = ps.names()
    for r in range(3):
        assert any(n.startswith(f"reason.round{r}.t2s.") for n in names)
    assert len(names) == len(set(names))


def test_round_count_validation():
    ps = ParameterSet(28)
    with pytest.raises(ConfigError):
        MultiRoundReasoning(ps, "reason", rounds=0, d=4, d_att=4, heads=1)


def test_disabled_direction_has_no_parameters_and_smaller_fusion():
    ps = ParameterSet(29)
    mr = MultiRoundReasoning(ps, "reason", rounds=1, d=4, d_att=4, heads=1, use_t2s=False)
    assert not any(".t2s." in n for n in ps.names())
    rnd = mr.rounds[0]
    assert rnd.fusion.weight.shape == ((1 + 3) * 4, 3)
    g = rng(30)
    _, traces = mr.run(full_sources(g), T.Tensor(g.normal(size=(2, 4))))
    assert traces[0].fusion.shape == (2, 3)
    assert traces[0].t2s is None


def test_text_only_sources_with_video_disabled():
    ps = ParameterSet(31)
    mr = MultiRoundReasoning(
        ps, "reason", rounds=1, d=4, d_att=4, heads=1,
        use_t2s=False, use_s2t=False, use_audio=False,
    )
    g = rng(32)
    src = ReasoningSources(video=None, audio=None,
                           caption=T.Tensor(g.normal(size=(3, 4))),
                           caption_pad=np.zeros(3, dtype=bool))
    out, traces = mr.run(src, T.Tensor(g.normal(size=(2, 4))))
    assert out.shape == (2, 4)
    assert traces[0].fusion.shape == (2, 1)


def test_empty_video_features_rejected():
    ps = ParameterSet(33)
    mr = MultiRoundReasoning(ps, "reason", rounds=1, d=4, d_att=4, heads=1,
                             use_audio=False, use_caption=False)
    src = ReasoningSources(video=T.Tensor(np.zeros((0, 2, 4))), audio=None, caption=None)
    with pytest.raises(DataError):
        mr.run(src, T.Tensor(np.zeros((2, 4))))
    with pytest.raises(DataError):
        mr.run(ReasoningSources(video=None, audio=None, caption=None),
               T.Tensor(np.zeros((2, 4))))


def test_gradients_reach_every_reasoning_parameter():
    ps = ParameterSet(34)
    mr = MultiRoundReasoning(ps, "reason", rounds=2, d=4, d_att=4, heads=2)
    g = rng(35)
    src = full_sources(g)
    que = T.Tensor(g.normal(size=(3, 4)))
    ps.zero_grads()
    with T.GradientTape() as tape:
        out, _ = mr.run(src, que)
        loss = T.reduce_sum(T.mul(out, out))
    T.backward(loss, tape)
    dead = [n for n, t in ps.items() if t.grad is None or not np.abs(t.grad).sum() > 0]
    assert dead == []
