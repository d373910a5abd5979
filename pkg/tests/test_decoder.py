import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from invpt import tensor as tc
from invpt.decoder import (AttentionState, DecoderConfig, EncoderFeatureAggregation, InvPTDecoder,
                           UpTransformerBlock, attention_message_passing, attention_scores,
                           efa_inject, fusion_attention, reshape_and_up, select_keys,
                           selective_attention, stage_plan)
from invpt.model import FinalHeads
from invpt.prelim import MultiTaskSequence, TaskSpec
from invpt.tensor import ConfigError, DimensionError, Tensor


def make_inputs(cfg, rng, n=1):
    h0, w0 = cfg.grid
    fc = MultiTaskSequence(Tensor(rng.normal(size=(n, cfg.tasks * h0 * w0, cfg.c0))), cfg.tasks, h0, w0)
    taps = [Tensor(rng.normal(size=(n, h0 * w0, cfg.encoder_width))) for _ in range(3)]
    return fc, taps


def test_shape_table_example():
    plan = stage_plan(2, 8, 8, 16)
    assert [g.q_shape for g in plan] == [(32, 16), (128, 8), (512, 4)]
    assert [g.k_shape for g in plan] == [(32, 16), (32, 8), (32, 4)]
    assert [g.v_shape for g in plan] == [g.k_shape for g in plan]
    assert [g.pool for g in plan] == [2, 4, 8]
    assert [g.grid for g in plan] == [(8, 8), (16, 16), (32, 32)]


@given(st.integers(2, 4), st.sampled_from([4, 8, 12]), st.sampled_from([4, 8]),
       st.sampled_from([4, 8, 16, 20]))
def test_shape_table_general(t, h0, w0, c0):
    plan = stage_plan(t, h0, w0, c0)
    for s, g in enumerate(plan):
        assert g.q_shape == (t * h0 * w0 * 4 ** s // 4, c0 // 2 ** s)
        assert g.k_shape == (t * h0 * w0 // 4, c0 // 2 ** s)


@pytest.mark.parametrize("kw", [dict(c0=10), dict(tasks=1), dict(retention=0.0), dict(retention=1.5),
                                dict(variant="dense"), dict(grid=(6, 8)), dict(efa_stages=(3,)),
                                dict(heads=3)])
def test_config_errors(kw):
    base = dict(tasks=2, grid=(8, 8), c0=16)
    with pytest.raises(ConfigError):
        DecoderConfig(**(base | kw))


def test_kept_keys_rounds_up():
    cfg = DecoderConfig(2, (8, 8), 16, retention=0.3)
    assert cfg.key_tokens == 32 and cfg.kept_keys == math.ceil(0.3 * 32)
    assert DecoderConfig(2, (8, 8), 16, retention=0.5).kept_keys == 16


def test_reshape_and_up_constant_and_identity():
    seq = MultiTaskSequence(Tensor(np.full((1, 2 * 4, 3), 2.5)), 2, 2, 2)
    up = reshape_and_up(seq, 2)
    assert (up.height, up.width) == (4, 4)
    assert up.data.shape == (1, 32, 3) and np.allclose(up.data.data, 2.5)
    assert reshape_and_up(seq, 1) is seq


def test_reshape_and_up_keeps_tasks_apart():
    data = np.concatenate([np.zeros((1, 4, 1)), np.ones((1, 4, 1))], axis=1)
    up = reshape_and_up(MultiTaskSequence(Tensor(data), 2, 2, 2), 2).data.data
    assert np.all(up[:, :16] == 0) and np.all(up[:, 16:] == 1)


def test_attention_scores_example():
    q = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    k = Tensor(np.array([[1.0, 1.0], [3.0, 0.0]]))
    s = attention_scores(q, k, 2).data
    assert np.allclose(s, np.array([[1.0, 3.0], [2.0, 0.0]]) / math.sqrt(2))
    with pytest.raises(DimensionError):
        attention_scores(q, Tensor(np.ones((2, 3))), 2)


def test_message_passing_shape_and_constant():
    prev = AttentionState(Tensor(np.full((1, 1, 32, 32), 0.7)), 2, (4, 4))
    m = attention_message_passing(prev).data
    assert m.shape == (1, 1, 128, 32)
    assert np.allclose(m, 0.7)


def test_message_passing_per_key_column_is_bilinear():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(1, 1, 2 * 4, 3))
    m = attention_message_passing(AttentionState(Tensor(s), 2, (2, 2))).data
    for t in range(2):
        for j in range(3):
            src = s[0, 0, 4 * t: 4 * (t + 1), j].reshape(2, 2)
            ref = tc.bilinear_resize(Tensor(src[None, None]), 4, 4).data.ravel()
            assert np.allclose(m[0, 0, 16 * t: 16 * (t + 1), j], ref)


def test_message_passing_rejects_bad_grid():
    with pytest.raises(DimensionError):
        attention_message_passing(AttentionState(Tensor(np.zeros((1, 1, 30, 4))), 2, (4, 4)))


def test_fusion_alpha_cases(rng):
    a = Tensor(rng.normal(size=(1, 1, 4, 5)))
    m = Tensor(rng.normal(size=(1, 1, 4, 5)))
    only_a, _ = fusion_attention(a, m, 1.0, 0.0)
    only_m, _ = fusion_attention(a, m, 0.0, 1.0)
    assert np.allclose(only_a.data, tc.softmax_rows(a).data, atol=1e-15)
    assert np.allclose(only_m.data, tc.softmax_rows(m).data, atol=1e-15)
    _, blend = fusion_attention(a, m, 0.5, 2.0)
    assert np.allclose(blend.data, 0.5 * a.data + 2.0 * m.data)
    assert np.allclose(fusion_attention(a, m, 0.5, 2.0)[0].data.sum(-1), 1)
    with pytest.raises(DimensionError):
        fusion_attention(a, Tensor(np.zeros((1, 1, 4, 4))), 1.0, 0.0)


def test_select_keys_example():
    msg = np.array([[0.9, 0.1, 0.5, 0.5]] * 3)[None, None]
    assert select_keys(Tensor(msg), 2).tolist() == [[[0, 2]]]


def test_selective_scatter_zeros_dropped_columns(rng):
    q = Tensor(rng.normal(size=(1, 1, 6, 4)))
    k = Tensor(rng.normal(size=(1, 1, 8, 4)))
    v = Tensor(rng.normal(size=(1, 1, 8, 4)))
    msg = Tensor(rng.normal(size=(1, 1, 6, 8)))
    attn, vals, out, idx = selective_attention(q, k, v, msg, 0.5, 4)
    assert attn.shape == (1, 1, 6, 4) and vals.shape == (1, 1, 4, 4)
    dropped = np.setdiff1d(np.arange(8), idx[0, 0])
    assert np.all(out.data[..., dropped] == 0)
    full = attention_scores(q, k, 4).data
    assert np.allclose(out.data[..., idx[0, 0]], full[..., idx[0, 0]])
    assert np.allclose(attn.data.sum(-1), 1)


def test_selective_full_retention_matches_plain_fusion(rng):
    q = Tensor(rng.normal(size=(1, 2, 6, 4)))
    k = Tensor(rng.normal(size=(1, 2, 8, 4)))
    v = Tensor(rng.normal(size=(1, 2, 8, 4)))
    msg = Tensor(rng.normal(size=(1, 2, 6, 8)))
    attn, vals, out, _ = selective_attention(q, k, v, msg, 1.0, 4)
    ref, scores = fusion_attention(attention_scores(q, k, 4), msg, 1.0, 0.0)
    assert np.abs((attn @ vals).data - (ref @ v).data).max() < 1e-12
    assert np.abs(out.data - attention_scores(q, k, 4).data).max() < 1e-12


@pytest.mark.parametrize("r", [0.0, -0.1, 1.01])
def test_selective_rejects_bad_retention(r, rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)))
    with pytest.raises(ConfigError):
        selective_attention(x, x, x, x, r, 2)


def test_efa_zero_tap_is_identity(rng):
    efa = EncoderFeatureAggregation(4, 8, 2, rng)
    f_up = MultiTaskSequence(Tensor(rng.normal(size=(1, 2 * 64, 8))), 2, 8, 8)
    out = efa_inject(f_up, Tensor(np.zeros((1, 16, 4))), efa)
    assert np.array_equal(out.data.data, f_up.data.data)


def test_efa_resize_and_tiling(rng):
    efa = EncoderFeatureAggregation(4, 8, 4, rng)
    tap = Tensor(rng.normal(size=(1, 16, 4)))
    proj = efa.project(tap, (4, 4))
    assert proj.shape == (1, 8, 16, 16)
    f_up = MultiTaskSequence(Tensor(np.zeros((1, 3 * 256, 8))), 3, 16, 16)
    out = efa_inject(f_up, tap, efa).data.data
    assert np.array_equal(out[:, :256], out[:, 256:512]) and np.array_equal(out[:, :256], out[:, 512:])
    with pytest.raises(DimensionError):
        efa_inject(MultiTaskSequence(Tensor(np.zeros((1, 2 * 256, 4))), 2, 16, 16), tap, efa)


def test_zero_value_projection_gives_pure_skip(rng):
    cfg = DecoderConfig(2, (4, 4), 8, 4, variant="fusion", efa_stages=())
    block = UpTransformerBlock(cfg.plan[0], cfg, rng)
    block.wv.weight.data[...] = 0
    assert np.all(block.wv.bias.data == 0)
    seq = MultiTaskSequence(Tensor(rng.normal(size=(1, 32, 8))), 2, 4, 4)
    out, _ = block(seq, None, None)
    normed = block.norm(seq.data).data
    assert np.array_equal(out.data.data, normed)


def test_stage_outputs_and_decoder_output():
    cfg = DecoderConfig(2, (8, 8), 16, 4)
    rng = np.random.default_rng(1)
    dec = InvPTDecoder(cfg, rng)
    fc, taps = make_inputs(cfg, rng)
    out = dec(fc, taps)
    assert [s.data.shape[1:] for s in out.stage_outputs] == [(128, 16), (512, 8), (2048, 4)]
    assert out.features.shape == (2, 4, 32, 32)
    assert [st.scores.shape for st in out.states] == [(1, 1, 32, 32), (1, 1, 128, 32), (1, 1, 512, 32)]
    assert out.states[0].kept is None and out.states[1].kept.shape == (1, 1, 16)


def test_one_stage_ablation():
    cfg = DecoderConfig(2, (8, 8), 16, 4, stages=1)
    rng = np.random.default_rng(2)
    out = InvPTDecoder(cfg, rng)(*make_inputs(cfg, rng))
    assert len(out.stage_outputs) == 1
    assert out.features.shape == (2, 4, 32, 32)


@pytest.mark.parametrize("variant", ["fusion", "selective"])
def test_decoder_is_deterministic(variant):
    cfg = DecoderConfig(2, (4, 4), 8, 4, variant=variant)
    res = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        res.append(InvPTDecoder(cfg, rng)(*make_inputs(cfg, rng)).features.data)
    assert np.array_equal(*res)


def test_tap_mapping_deepest_to_coarsest():
    dec = InvPTDecoder(DecoderConfig(2, (4, 4), 8, 4), np.random.default_rng(0))
    taps = ["t2", "t4", "t6"]
    assert [dec.tap_for_stage(taps, s) for s in range(3)] == ["t6", "t4", "t2"]


def test_final_heads_shapes(rng):
    tasks = [TaskSpec("semseg", "categorical", 4, "miou"), TaskSpec("depth", "continuous", 1, "rmse")]
    heads = FinalHeads(tasks, 4, rng)
    out = heads(Tensor(rng.normal(size=(2 * 3, 4, 16, 16))), (32, 32))
    assert out["semseg"].shape == (3, 4, 32, 32) and out["depth"].shape == (3, 1, 32, 32)
