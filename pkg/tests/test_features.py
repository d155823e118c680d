import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ethodec.autodiff import Tape, Tensor, parameter, sum_
from ethodec.errors import ContractError, FormatError, ValidationError
from ethodec.features import (
    Run, ToyEncoder, VideoClip, adaptive_pool_1d, encode_video, features_from_bytes, features_to_bytes,
    filter_by_run_length, label_runs, load_features, pool_bins, sample_run, save_features, subsample_uniform,
)


def test_clip_validation():
    with pytest.raises(ValidationError):
        VideoClip(np.zeros((2, 4, 4, 1)))
    with pytest.raises(ValidationError):
        VideoClip(np.zeros((0, 4, 4, 3)))


def test_zero_frames_give_zero_features(rng):
    enc = ToyEncoder(parameter(rng.normal(size=(3, 5))), parameter(np.zeros(5)))
    out = encode_video(VideoClip(np.zeros((3, 4, 4, 3))), enc)
    np.testing.assert_array_equal(out.data, 0.0)


def test_constant_colour_rows_identical(rng):
    enc = ToyEncoder.init(6, rng)
    frames = np.broadcast_to(np.array([0.2, 0.5, 0.9]), (4, 3, 3, 3)).copy()
    out = encode_video(VideoClip(frames), enc).data
    assert (out == out[0]).all()


def test_encoder_hand_values():
    frame = np.array([[[0.0, 1.0, 0.5], [1.0, 1.0, 0.5]], [[0.0, 0.0, 0.5], [1.0, 0.0, 0.5]]])
    w = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    enc = ToyEncoder(parameter(w), parameter(np.array([0.1, -0.1])))
    # channel means: r 0.5, g 0.5, b 0.5
    np.testing.assert_allclose(enc(frame[None]).data, [[1.1, 1.4]])


def test_encoder_is_differentiable(rng):
    enc = ToyEncoder.init(4, rng)
    with Tape() as tape:
        tape.backward(sum_(enc(rng.random((2, 3, 3, 3)))))
    assert enc.weight.grad is not None and enc.bias.grad is not None


def test_pool_examples():
    np.testing.assert_allclose(adaptive_pool_1d(np.array([[1.0], [2], [3], [4]]), 2), [[1.5], [3.5]])
    np.testing.assert_allclose(adaptive_pool_1d(np.array([[1.0], [2], [3], [4], [5]]), 2), [[2.0], [4.0]])
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(adaptive_pool_1d(x, 3), x)


def test_pool_bins_rule():
    assert pool_bins(5, 2) == [(0, 3), (2, 5)]
    with pytest.raises(ContractError):
        pool_bins(0, 2)


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**31))
def test_pool_is_convex_combination(t, target, seed):
    x = np.random.default_rng(seed).normal(size=(t, 3))
    y = adaptive_pool_1d(x, target)
    assert y.shape == (target, 3)
    assert (y <= x.max(axis=0) + 1e-12).all() and (y >= x.min(axis=0) - 1e-12).all()
    for i, (lo, hi) in enumerate(pool_bins(t, target)):
        assert 0 <= lo < hi <= t
        np.testing.assert_allclose(y[i], x[lo:hi].mean(axis=0), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_pool_preserves_mean_when_divisible(k, target, seed):
    x = np.random.default_rng(seed).normal(size=(k * target, 2))
    np.testing.assert_allclose(adaptive_pool_1d(x, target).mean(), x.mean(), atol=1e-12)


def test_pool_tensor_gradient(rng):
    x = parameter(rng.normal(size=(5, 2)))
    with Tape() as tape:
        tape.backward(sum_(adaptive_pool_1d(x, 2)))
    # frame 2 sits in both bins, each of width 3
    np.testing.assert_allclose(x.grad[:, 0], [1 / 3, 1 / 3, 2 / 3, 1 / 3, 1 / 3])


def test_run_threshold_boundary():
    assert filter_by_run_length([1] * 16) == [Run(1, 0, 16)]
    assert filter_by_run_length([1] * 15) == []


def test_split_run_has_no_qualifier():
    labels = [0] * 3 + [1] + [0] * 14
    assert filter_by_run_length(labels) == []


@given(st.lists(st.integers(0, 2), min_size=1, max_size=60), st.lists(st.integers(3, 4), min_size=1, max_size=60))
def test_runs_do_not_span_clips(a, b):
    joined = filter_by_run_length(a + b, 4)
    separate = filter_by_run_length(a, 4) + [Run(r.label, r.start + len(a), r.length) for r in filter_by_run_length(b, 4)]
    assert joined == separate


def test_label_runs_cover_sequence():
    runs = label_runs([2, 2, 5, 5, 5, 2])
    assert sum(r.length for r in runs) == 6
    assert [r.label for r in runs] == [2, 5, 2]


def test_subsample_examples():
    assert subsample_uniform(16).tolist() == list(range(16))
    assert subsample_uniform(32, 16).tolist() == list(range(0, 32, 2))
    assert subsample_uniform(10, 16).tolist() == [0, 0, 1, 1, 2, 3, 3, 4, 5, 5, 6, 6, 7, 8, 8, 9]


@given(st.integers(1, 500), st.integers(1, 64))
def test_subsample_properties(n, k):
    idx = subsample_uniform(n, k)
    assert idx[0] == 0 and len(idx) == k
    assert (np.diff(idx) >= 0).all()
    assert idx.min() >= 0 and idx.max() < n


def test_sample_run_modes(rng):
    run = Run(3, 10, 40)
    assert sample_run(run, 16).tolist() == (10 + subsample_uniform(40, 16)).tolist()
    centred = sample_run(run, 16, "contiguous")
    assert centred.tolist() == list(range(22, 38))
    rnd = sample_run(run, 16, "contiguous", rng)
    assert (np.diff(rnd) == 1).all() and rnd[0] >= 10 and rnd[-1] < 50
    with pytest.raises(ContractError):
        sample_run(run, 16, "strided")


def test_paff_roundtrip(tmp_path, rng):
    x = rng.normal(size=(8, 256))
    save_features(tmp_path / "a.paff", x)
    np.testing.assert_array_equal(load_features(tmp_path / "a.paff"), x)
    save_features(tmp_path / "b.paff", x, dtype=1)
    np.testing.assert_array_equal(load_features(tmp_path / "b.paff"), x.astype(np.float32))


def test_paff_rejections():
    buf = features_to_bytes(np.ones((2, 3)))
    with pytest.raises(FormatError) as e:
        features_from_bytes(b"NOPE" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        features_from_bytes(buf[:-8])
    assert e.value.offset == 17
    with pytest.raises(FormatError):
        features_from_bytes(buf[:10])
