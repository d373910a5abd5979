import numpy as np
import pytest
from hypothesis import given, strategies as st

from invpt import tensor as tc
from invpt.prelim import Combine, MultiTaskSequence, PrelimDecoder, TaskSpec
from invpt.tensor import ConfigError, DimensionError, Tensor

SEG = TaskSpec("semseg", "categorical", 4, "miou")
DEPTH = TaskSpec("depth", "continuous", 1, "rmse")


def test_taskspec_validation():
    assert DEPTH.lower_is_better and not SEG.lower_is_better
    for bad in [dict(kind="categorical", channels=1), dict(kind="continuous", channels=0),
                dict(kind="ordinal", channels=2), dict(metric="ap"), dict(weight=0.0)]:
        kw = dict(name="x", kind="categorical", channels=3, metric="miou") | bad
        with pytest.raises(ConfigError):
            TaskSpec(**kw)


def test_prelim_shapes_and_zero_weights(rng):
    dec = PrelimDecoder(SEG, 6, 32, rng)
    feat, pred = dec(Tensor(rng.normal(size=(2, 6, 8, 8))))
    assert feat.shape == (2, 32, 8, 8) and pred.shape == (2, 4, 8, 8)
    for _, p in dec.named_parameters():
        p.data = np.zeros_like(p.data)
    _, pred = dec(Tensor(rng.normal(size=(2, 6, 8, 8))))
    assert np.all(pred.data == 0)


def test_combine_shape_and_task_blocks(rng):
    tasks = [SEG, DEPTH]
    comb = Combine(tasks, 5, 16, rng)
    outs = [(Tensor(rng.normal(size=(1, 5, 8, 8))), Tensor(rng.normal(size=(1, t.channels, 8, 8))))
            for t in tasks]
    seq = comb(outs)
    assert seq.data.shape == (1, 128, 16)
    # rows [0, 64) depend only on task 0
    alone = comb.proj[0](tc.concat(list(outs[0]), axis=1).reshape(1, 9, 64).transpose(0, 2, 1))
    assert np.array_equal(seq.data.data[:, :64], alone.data)


def test_identity_projection_reproduces_channels(rng):
    tasks = [SEG, DEPTH]
    c_p, c0 = 3, 8
    comb = Combine(tasks, c_p, c0, rng)
    for t, proj in zip(tasks, comb.proj):
        c_in = c_p + t.channels
        proj.weight.data = np.eye(c_in, c0)
        proj.bias.data[...] = 0
    outs = [(Tensor(rng.normal(size=(1, c_p, 2, 2))), Tensor(rng.normal(size=(1, t.channels, 2, 2))))
            for t in tasks]
    seq = comb(outs).data.data
    for i, (f, p) in enumerate(outs):
        cat = np.concatenate([f.data, p.data], axis=1)[0].reshape(cat_c := f.shape[1] + p.shape[1], 4).T
        block = seq[0, 4 * i: 4 * (i + 1)]
        assert np.array_equal(block[:, :cat_c], cat)
        assert np.all(block[:, cat_c:] == 0)


def test_combine_config_errors(rng):
    with pytest.raises(ConfigError):
        Combine([SEG, DEPTH], 4, 10, rng)
    with pytest.raises(ConfigError):
        Combine([SEG], 4, 8, rng)


@given(st.integers(1, 2), st.integers(2, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_split_maps_flatten_roundtrip_is_bitwise(n, t, h, w, c):
    data = np.random.default_rng(n * 100 + t * 10 + h).normal(size=(n, t * h * w, c))
    seq = MultiTaskSequence(Tensor(data), t, h, w)
    back = MultiTaskSequence.from_maps(seq.to_maps(), t)
    assert np.array_equal(back.data.data, data)
    slices = seq.task_slices()
    assert np.array_equal(np.concatenate([s.data for s in slices], axis=1), data)


def test_sequence_layout_and_errors():
    data = np.arange(2 * 3 * 2 * 1, dtype=float).reshape(1, 12, 1)
    maps = MultiTaskSequence(Tensor(data), 2, 3, 2).to_maps().data
    assert maps.shape == (2, 1, 3, 2)
    assert maps[1, 0, 0, 0] == 6.0    # task 1 starts at row H*W
    with pytest.raises(DimensionError):
        MultiTaskSequence(Tensor(np.zeros((1, 11, 1))), 2, 3, 2)


def test_gradients_reach_features_and_predictions(rng):
    tasks = [SEG, DEPTH]
    comb = Combine(tasks, 4, 8, rng)
    feats = [tc.parameter(rng.normal(size=(1, 4, 2, 2))) for _ in tasks]
    preds = [tc.parameter(rng.normal(size=(1, t.channels, 2, 2))) for t in tasks]
    w = Tensor(rng.normal(size=(1, 8, 8)))
    tc.tsum(comb(list(zip(feats, preds))).data * w).backward()
    for p in feats + preds:
        assert p.grad is not None and np.abs(p.grad).sum() > 0
