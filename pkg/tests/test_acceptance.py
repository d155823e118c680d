"""End-to-end acceptance checks; each prints a PASS/FAIL line (see the summary)."""

import json
import time

import numpy as np
import pytest

from ethodec.autodiff import finite_difference_check_many, parameter
from ethodec.cli import main
from ethodec.dataio import SyntheticSpec, generate_synthetic
from ethodec.decoder import (
    DecoderConfig, DecoderLayerWeights, QueryBank, QueryDecoderModel, decode, init_queries, permute_model,
)
from ethodec.experiment import ethogram_effect
from ethodec.features import adaptive_pool_1d, filter_by_run_length, pooling_matrix, subsample_uniform
from ethodec.metrics import class_avg_accuracy, macro_map
from ethodec.optim import LrSchedule, lr_at
from ethodec.text import MlmConfig, EncoderWeights, build_vocab, mask_tokens, CLS
from ethodec.training import TrainConfig, bce_loss, fit, predict, softmax_ce_loss, split_metric


def test_gradient_correctness(criterion):
    with criterion("gradient check: encoder > pool > 3-layer decoder > head > CE and BCE") as c:
        rng = np.random.default_rng(1)
        bank = QueryBank(parameter(rng.normal(size=(5, 16))), list(range(5)))
        model = QueryDecoderModel.create(bank, DecoderConfig(depth=3, pooled_len=4), seed=2, with_encoder=True)
        # frames whose spatial means vary over time, so key gradients are not vanishingly small
        frames = np.clip(rng.random((8, 1, 1, 3)) + 0.05 * rng.normal(size=(8, 4, 4, 3)), 0, 1)
        params = list(model.parameters().values())
        t0 = time.perf_counter()

        def losses(_):
            logits = model.forward_frames(frames)
            return softmax_ce_loss(logits, 2), bce_loss(logits, [1, 0, 0, 1, 0])

        err_ce, err_bce = finite_difference_check_many(losses, params, eps=1e-4)
        secs = time.perf_counter() - t0
        c.detail = f"max rel err ce={err_ce:.2e} bce={err_bce:.2e}, {secs:.1f}s"
        assert err_ce < 1e-4 and err_bce < 1e-4
        assert secs < 60


def test_equation_form_identity(criterion):
    with criterion("equation form: no norm, zero sub-blocks, decode(q, x) == q") as c:
        rng = np.random.default_rng(0)
        layers = []
        for i in range(3):
            layer = DecoderLayerWeights.init(16, 4, rng, use_norm=False)
            for k, t in layer.params.items():
                if not k.startswith("ln"):
                    t.data[:] = 0.0
            layers.append(layer)
        q = rng.normal(size=(5, 16))
        out = decode(parameter(q), rng.normal(size=(8, 16)), layers).data
        c.detail = f"max |diff| {np.abs(out - q).max():.1e}"
        assert np.array_equal(out, q)


def test_joint_permutation_equivariance(criterion):
    with criterion("joint permutation equivariance, 100 permutations, C=8, bitwise") as c:
        rng = np.random.default_rng(3)
        bank = QueryBank(parameter(rng.normal(size=(8, 16))), list(range(8)))
        model = QueryDecoderModel.create(bank, DecoderConfig(depth=3, pooled_len=8), seed=4)
        x = rng.normal(size=(12, 16))
        base = model.forward(x).data
        bad = 0
        for _ in range(100):
            perm = rng.permutation(8)
            if not np.array_equal(permute_model(model, perm).forward(x).data, base[perm]):
                bad += 1
        c.detail = f"{100 - bad}/100 exact"
        assert bad == 0


def _overfit(task):
    ds = generate_synthetic(SyntheticSpec(classes=6, noise=0.1, dim=64, task=task))
    corpus = [t for e in ds.ethogram for t in (e.name, e.description)] + ds.prose
    lm = EncoderWeights.init(build_vocab(corpus), MlmConfig(dim=64), seed=0)
    model = QueryDecoderModel.create(init_queries(ds.ethogram, "descriptions", lm), DecoderConfig(), seed=0)
    cfg = TrainConfig(task=task, epochs=200)
    cache = ds.feature_cache()
    goal = 1.0 if task == "multiclass" else 0.95
    best = {"metric": 0.0, "epoch": 0}

    def progress(row):
        _, s, y = predict(model, ds.manifest, "train", cfg, cache)
        best["metric"], best["epoch"] = split_metric(s, y, task), row["epoch"]
        return best["metric"] >= goal

    t0 = time.perf_counter()
    fit(model, ds.manifest, cfg, cache=cache, progress=progress)
    return best, time.perf_counter() - t0, goal


@pytest.mark.slow
@pytest.mark.parametrize("task", ["multiclass", "multilabel"])
def test_overfit_oracle(criterion, task):
    name = "train top-1 = 100%" if task == "multiclass" else "train mAP >= 0.95"
    with criterion(f"overfit oracle ({task}): {name} within 200 epochs, < 5 min") as c:
        best, secs, goal = _overfit(task)
        c.detail = f"reached {best['metric']:.4f} at epoch {best['epoch']}, {secs:.0f}s"
        assert best["metric"] >= goal
        assert secs < 300


@pytest.mark.slow
def test_ethogram_effect(criterion):
    with criterion("ethogram effect: mean tail mAP, DSC+FT >= CLS+PT, C=12, seeds 0-4") as c:
        res = ethogram_effect(range(5))
        mean = res["mean"]
        parts = []
        for v in ("CLS+PT", "DSC+FT"):
            parts.append(v + " " + " ".join(f"{k}={mean[v][k]:.3f}" for k in ("all", "head", "middle", "tail")))
        per_seed = "; ".join(f"s{s}: {r['CLS+PT']['tail']:.3f} vs {r['DSC+FT']['tail']:.3f}"
                             for s, r in res["per_seed"].items())
        c.detail = " | ".join(parts) + f" | tail per seed (CLS+PT vs DSC+FT) {per_seed}"
        print("5-seed means:", json.dumps(mean, indent=1))
        assert mean["DSC+FT"]["tail"] >= mean["CLS+PT"]["tail"]


def _brute_ap(s, y):
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    hits, total = 0, 0.0
    for k, i in enumerate(order, start=1):
        if y[i]:
            hits += 1
            total += hits / k
    return total / hits if hits else None


def test_metrics_oracle(criterion):
    with criterion("metrics oracle: macro mAP and C-Avg vs brute force, 100 instances N=50 C=8") as c:
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            scores = rng.normal(size=(50, 8))
            if rng.random() < 0.3:
                scores = np.round(scores, 1)  # force ties
            labels = (rng.random((50, 8)) < 0.25).astype(int)
            labels[rng.integers(50), rng.integers(8)] = 1
            aps = [a for a in (_brute_ap(scores[:, k], labels[:, k]) for k in range(8)) if a is not None]
            worst = max(worst, abs(macro_map(scores, labels)["all"] - sum(aps) / len(aps)))
            truth = rng.integers(0, 8, size=50)
            pred = [max(range(8), key=lambda k: (scores[i, k], -k)) for i in range(50)]
            per = []
            for k in range(8):
                rows = [i for i in range(50) if truth[i] == k]
                if rows:
                    per.append(sum(pred[i] == k for i in rows) / len(rows))
            worst = max(worst, abs(class_avg_accuracy(scores, truth) - sum(per) / len(per)))
        c.detail = f"max |diff| {worst:.1e}"
        assert worst <= 1e-9


def test_masking_statistics(criterion):
    with criterion("masking: selected fraction in [0.18, 0.22] over 10,000 positions, m=0.2") as c:
        seq = np.concatenate([[CLS], np.random.default_rng(0).integers(4, 50, size=10_000)])
        _, pos, _ = mask_tokens(seq, MlmConfig(mask_prob=0.2), np.random.default_rng(2024), 50)
        frac = pos.size / 10_000
        c.detail = f"fraction {frac:.4f}"
        assert 0.18 <= frac <= 0.22


def test_schedule_anchors(criterion):
    with criterion("schedule: lr(0)=1e-5, lr(end of warm-up)=1e-4 exactly, junction continuous") as c:
        s = LrSchedule(1e-5, 1e-4, 10, 100, steps_per_epoch=100_000_000)
        w = s.warmup_steps
        start, peak = lr_at(0, s), lr_at(w, s)
        left, right = lr_at(w - 1, s), lr_at(w + 1, s)
        c.detail = f"lr(0)={start!r} lr(w)={peak!r} gaps {1e-4 - left:.1e}/{1e-4 - right:.1e}"
        assert start == 1e-5 and peak == 1e-4
        assert abs(left - peak) <= 1e-12 and abs(right - peak) <= 1e-12


def test_frozen_lm(criterion):
    with criterion("frozen LM: encoder hash unchanged by behaviour training") as c:
        ds = generate_synthetic(SyntheticSpec(classes=12, dim=16, seed=3))
        corpus = [t for e in ds.ethogram for t in (e.name, e.description)]
        lm = EncoderWeights.init(build_vocab(corpus), MlmConfig(dim=16, heads=2, depth=1, max_len=64), seed=1)
        before = lm.content_hash()
        model = QueryDecoderModel.create(init_queries(ds.ethogram, "descriptions", lm),
                                         DecoderConfig(depth=1, heads=2, pooled_len=4), seed=0)
        q0 = model.bank.tokens.data.copy()
        cfg = TrainConfig(task="multilabel", epochs=2, warmup_epochs=1, frames=8)
        fit(model, ds.manifest, cfg, cache=ds.feature_cache(), frozen_lm=lm)
        after = lm.content_hash()
        c.detail = f"hash {before[:12]} -> {after[:12]}, queries moved {np.abs(model.bank.tokens.data - q0).max():.1e}"
        assert before == after
        assert not np.array_equal(model.bank.tokens.data, q0)


def test_protocol_checks(criterion):
    with criterion("protocol: run of 16 kept and 15 dropped; subsample(32,16) even; pooling convex x1000") as c:
        runs = filter_by_run_length([1] * 16 + [2] * 15 + [3] * 17, 16)
        assert [(r.label, r.length) for r in runs] == [(1, 16), (3, 17)]
        assert np.array_equal(subsample_uniform(32, 16), np.arange(0, 32, 2))
        rng = np.random.default_rng(5)
        for _ in range(1000):
            t, tp = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            w = pooling_matrix(t, tp)
            assert (w >= 0).all() and np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)
            x = rng.normal(size=(t, 3))
            y = adaptive_pool_1d(x, tp)
            assert (y >= x.min(axis=0) - 1e-12).all() and (y <= x.max(axis=0) + 1e-12).all()
        c.detail = "all 1000 pairs convex"


def _e2e(root):
    d = root / "data"
    steps = [
        ["synth", "--classes", "12", "--dim", "16", "--seed", "3", "--out", d],
        ["lm-train", "--ethogram", d / "ethogram.tsv", "--corpus", d / "prose.txt", "--dim", "16", "--depth", "1",
         "--heads", "2", "--epochs", "2", "--max-len", "64", "--seed", "3", "--out", root / "lm"],
        ["embed-queries", "--ethogram", d / "ethogram.tsv", "--source", "descriptions", "--lm",
         root / "lm" / "ft.edwt", "--out", root / "q.edwt"],
        ["train", "--task", "multilabel", "--queries", root / "q.edwt", "--manifest", d / "manifest.json",
         "--lm", root / "lm" / "ft.edwt", "--depth", "2", "--heads", "2", "--epochs", "4", "--warmup-epochs", "1",
         "--pooled-len", "4", "--frames", "8", "--seed", "3", "--out", root / "run"],
        ["eval", "--model", root / "run" / "model.edwt", "--manifest", d / "manifest.json", "--out", root / "eval"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv[0]
    return root / "eval"


def test_end_to_end_determinism(criterion, tmp_path):
    with criterion("determinism: two seeded synth > lm-train > embed > train > eval runs, identical reports") as c:
        a, b = _e2e(tmp_path / "a"), _e2e(tmp_path / "b")
        names = ["report.csv", "report.svg", "report.json", "predictions.csv"]
        same = [n for n in names if (a / n).read_bytes() == (b / n).read_bytes()]
        model_same = (tmp_path / "a/run/model.edwt").read_bytes() == (tmp_path / "b/run/model.edwt").read_bytes()
        c.detail = f"{len(same)}/{len(names)} report files identical, checkpoint identical={model_same}"
        assert len(same) == len(names) and model_same
