import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ethodec.autodiff import Tape, finite_difference_check, parameter
from ethodec.dataio import SyntheticSpec, generate_synthetic
from ethodec.decoder import DecoderConfig, QueryBank, QueryDecoderModel
from ethodec.errors import ConfigError, ContractError, TrainingError
from ethodec.optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at
from ethodec.training import (
    LOG_HEADER, TrainConfig, bce_loss, build_samples, fit, predict, softmax_ce_loss, split_metric,
)

finite = st.floats(-30, 30, allow_nan=False)


# ---- losses

def test_ce_examples():
    assert softmax_ce_loss(np.zeros(4), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    assert softmax_ce_loss(np.array([0.0, 1000.0, 0.0]), 1).item() == pytest.approx(0.0, abs=1e-12)
    assert softmax_ce_loss(np.array([1.0, 2.0]), 0).item() == pytest.approx(1.313262, abs=1e-6)


def test_ce_batch_mean():
    logits = np.array([[1.0, 2.0], [0.0, 0.0]])
    assert softmax_ce_loss(logits, [0, 1]).item() == pytest.approx((1.3132616875 + math.log(2)) / 2, abs=1e-9)


def test_ce_errors():
    with pytest.raises(ContractError):
        softmax_ce_loss(np.zeros(3), 3)
    with pytest.raises(ContractError):
        softmax_ce_loss(np.zeros(3), -1)
    with pytest.raises(ContractError):
        softmax_ce_loss(np.zeros((2, 3)), [0])


def test_bce_examples():
    assert bce_loss(np.zeros(3), [1, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-12)
    big = bce_loss(np.array([1000.0]), [1])
    assert big.item() == pytest.approx(0.0, abs=1e-12) and math.isfinite(big.item())
    assert bce_loss(np.array([1.0, -1.0]), [1, 0]).item() == pytest.approx(0.313262, abs=1e-6)
    with pytest.raises(ContractError):
        bce_loss(np.zeros(2), [0.5, 1])


@given(st.lists(finite, min_size=2, max_size=8), st.floats(-50, 50), st.data())
def test_ce_shift_invariance(logits, c, data):
    y = data.draw(st.integers(0, len(logits) - 1))
    a = softmax_ce_loss(np.array(logits), y).item()
    b = softmax_ce_loss(np.array(logits) + c, y).item()
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


@given(st.lists(finite, min_size=1, max_size=8), st.data())
def test_bce_symmetry(logits, data):
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(logits), max_size=len(logits))))
    a = bce_loss(np.array(logits), y).item()
    b = bce_loss(-np.array(logits), 1 - y).item()
    assert abs(a - b) <= 1e-10


@pytest.mark.parametrize("kind", ["ce", "bce"])
def test_loss_gradients_match_fd(kind):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    y = rng.integers(0, 2, size=(3, 5))
    if kind == "ce":
        f = lambda ps: softmax_ce_loss(ps[0], [0, 4, 2])
    else:
        f = lambda ps: bce_loss(ps[0], y)
    assert finite_difference_check(f, [parameter(x)], eps=1e-5) < 1e-7


# ---- schedule

def test_lr_anchors():
    s = LrSchedule(steps_per_epoch=4)
    assert lr_at(0, s) == 1e-5
    assert lr_at(40, s) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(39, s) < 1e-4
    assert lr_at(20, s) == pytest.approx(5.5e-5, abs=1e-18)
    assert lr_at(400, s) == 0.0
    assert lr_at(10_000, s) == 0.0


def test_lr_junction_continuous():
    s = LrSchedule(steps_per_epoch=1000)
    w = s.warmup_steps
    assert lr_at(w, s) == 1e-4
    # one step either side differs from the peak by at most one warm-up increment
    assert 0 < 1e-4 - lr_at(w - 1, s) <= 9e-5 / w + 1e-18
    assert 0 < 1e-4 - lr_at(w + 1, s) < 9e-5 / w


def test_lr_cosine_midpoint_and_monotone():
    s = LrSchedule(warmup_epochs=0, total_epochs=10, steps_per_epoch=10)
    assert lr_at(50, s) == pytest.approx(0.5e-4, rel=1e-12)
    vals = [lr_at(i, s) for i in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ConfigError):
        LrSchedule(start_lr=1e-3, peak_lr=1e-4)
    with pytest.raises(ConfigError):
        LrSchedule(warmup_epochs=20, total_epochs=10)
    with pytest.raises(ContractError):
        lr_at(-1, LrSchedule())


# ---- optimiser

def test_adamw_decay_only():
    p = np.array([1.0, -2.0, 3.0])
    adamw_step({"p": p}, {"p": np.zeros(3)}, OptimizerState(weight_decay=0.01), 0.1)
    np.testing.assert_array_equal(p, np.array([1.0, -2.0, 3.0]) * 0.999)


def test_adamw_zero_lr_updates_moments():
    p = np.array([1.0, 2.0])
    st_ = OptimizerState()
    adamw_step({"p": p}, {"p": np.array([0.5, -1.0])}, st_, 0.0)
    np.testing.assert_array_equal(p, [1.0, 2.0])
    np.testing.assert_allclose(st_.m["p"], [0.05, -0.1], rtol=1e-15)
    np.testing.assert_allclose(st_.v["p"], [0.00025, 0.001], rtol=1e-12)
    assert st_.step == 1


def test_adamw_single_step_hand():
    p = np.array([1.0])
    adamw_step({"p": p}, {"p": np.array([1.0])}, OptimizerState(weight_decay=0.0), 0.01)
    # m_hat = v_hat = 1 after bias correction
    assert p[0] == pytest.approx(1 - 0.01 * 1 / (1 + 1e-8), abs=1e-15)


def test_adamw_rejects_nan_gradient():
    with pytest.raises(TrainingError):
        adamw_step({"p": np.ones(2)}, {"p": np.array([np.nan, 0.0])}, OptimizerState(), 0.1)


def test_adamw_wrapper_reads_grads():
    w = parameter(np.array([2.0, -1.0]))
    opt = AdamW({"w": w}, weight_decay=0.0)
    with Tape() as tape:
        loss = (w * w).sum()
        tape.backward(loss)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, [1.9, -0.9], atol=1e-8)


# ---- loops

@pytest.fixture(scope="module")
def tiny_mc():
    return generate_synthetic(SyntheticSpec(classes=2, dim=8, head_clips=10, task="multiclass", seed=0))


@pytest.fixture(scope="module")
def tiny_ml():
    return generate_synthetic(SyntheticSpec(classes=2, dim=8, head_clips=10, task="multilabel", seed=0))


def make_model(ds, ids=None, seed=0):
    ids = ids if ids is not None else [e.class_id for e in ds.ethogram]
    rng = np.random.default_rng(seed)
    bank = QueryBank(parameter(rng.normal(size=(len(ids), 8))), ids)
    return QueryDecoderModel.create(bank, DecoderConfig(depth=1, heads=2, pooled_len=4), seed=seed)


def short(task, **kw):
    base = dict(task=task, epochs=3, warmup_epochs=1, batch_size=8, frames=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_samples_multiclass_runs(tiny_mc):
    samples = build_samples(tiny_mc.manifest, "train", [0, 1], "multiclass")
    assert samples
    for s in samples:
        assert s.run.length >= 16 and s.run.label >= 0
        assert s.sample_id.startswith(tiny_mc.manifest.records[s.record_index].id + ":")


def test_samples_multilabel_per_clip(tiny_ml):
    samples = build_samples(tiny_ml.manifest, "test", [0, 1], "multilabel")
    n = sum(r.split == "test" for r in tiny_ml.manifest.records)
    assert len(samples) == n
    assert all(s.target.sum() >= 1 for s in samples)


def test_zero_lr_keeps_weights(tiny_mc):
    model = make_model(tiny_mc)
    before = {k: v.copy() for k, v in model.state().items()}
    cfg = short("multiclass", start_lr=0.0, peak_lr=0.0, weight_decay=0.0)
    fit(model, tiny_mc.manifest, cfg, cache=tiny_mc.feature_cache())
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("task", ["multiclass", "multilabel"])
def test_fit_deterministic(task, tiny_mc, tiny_ml):
    ds = tiny_mc if task == "multiclass" else tiny_ml
    runs = []
    for _ in range(2):
        model = make_model(ds)
        res = fit(model, ds.manifest, short(task), cache=ds.feature_cache())
        runs.append(([r["train_loss"] for r in res.history], model.state()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_fit_writes_log_and_checkpoint(tmp_path, tiny_mc):
    model = make_model(tiny_mc)
    res = fit(model, tiny_mc.manifest, short("multiclass"), out_dir=tmp_path, cache=tiny_mc.feature_cache())
    with open(res.log_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == LOG_HEADER == ["epoch", "step", "lr", "train_loss", "val_metric"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    assert all(0.0 <= float(r[4]) <= 1.0 for r in rows[1:])
    back = QueryDecoderModel.load(res.checkpoint_path)
    for k, v in model.state().items():
        np.testing.assert_array_equal(back.state()[k], v)


def test_empty_class_warns(tiny_mc):
    model = make_model(tiny_mc, ids=[0, 1, 99])
    with pytest.warns(UserWarning, match="99"):
        fit(model, tiny_mc.manifest, short("multiclass", epochs=1, warmup_epochs=0), cache=tiny_mc.feature_cache())


def test_task_mismatch(tiny_mc):
    with pytest.raises(ConfigError):
        fit(make_model(tiny_mc), tiny_mc.manifest, short("multilabel"), cache=tiny_mc.feature_cache())


def test_progress_can_stop(tiny_mc):
    seen = []
    res = fit(make_model(tiny_mc), tiny_mc.manifest, short("multiclass", epochs=5),
              cache=tiny_mc.feature_cache(), progress=lambda row: seen.append(row) or row["epoch"] == 2)
    assert len(res.history) == 2 and len(seen) == 2


def test_frozen_lm_check(tiny_mc):
    class Drifting:
        n = 0

        def content_hash(self):
            self.n += 1
            return str(self.n)

    with pytest.raises(TrainingError):
        fit(make_model(tiny_mc), tiny_mc.manifest, short("multiclass", epochs=1, warmup_epochs=0),
            cache=tiny_mc.feature_cache(), frozen_lm=Drifting())


def test_predict_and_metric(tiny_ml):
    model = make_model(tiny_ml)
    cfg = short("multilabel")
    ids, scores, labels = predict(model, tiny_ml.manifest, "val", cfg, tiny_ml.feature_cache())
    assert scores.shape == labels.shape == (len(ids), 2)
    again = predict(model, tiny_ml.manifest, "val", cfg, tiny_ml.feature_cache())[1]
    np.testing.assert_array_equal(scores, again)
    m = split_metric(scores, labels, "multilabel")
    assert 0.0 <= m <= 1.0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(task="regression")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, warmup_epochs=10)
    with pytest.raises(ConfigError):
        TrainConfig(sampling="random")
