"""Losses and the multi-class / multi-label training loops."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, as_tensor, log_softmax_rows, mean, mul, no_grad, pick, softplus, sub
from .dataio import DatasetManifest, TASKS
from .decoder import QueryDecoderModel
from .errors import ConfigError, ContractError, NonFiniteError, TrainingError
from .features import FeatureCache, Run, filter_by_run_length, sample_run, subsample_uniform
from .metrics import macro_map, top1_accuracy
from .optim import AdamW, LrSchedule, lr_at

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "lr", "train_loss", "val_metric"]


# --------------------------------------------------------------------- losses


def softmax_ce_loss(logits, target) -> Tensor:
    """``-log softmax(logits)[target]``, averaged over a leading batch axis."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    c = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ContractError(f"target shape {target.shape} does not match logits {logits.shape}")
    if (target < 0).any() or (target >= c).any():
        raise ContractError(f"class id out of range [0, {c})")
    return -mean(pick(log_softmax_rows(logits), target))


def bce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy in the stable form ``softplus(l) - y*l``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ContractError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")
    return mean(sub(softplus(logits), mul(logits, labels)))


# -------------------------------------------------------------------- samples


@dataclass
class TrainConfig:
    task: str = "multiclass"
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 64
    start_lr: float = 1e-5
    peak_lr: float = 1e-4
    floor_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    frames: int = 16
    run_threshold: int = 16
    sampling: str = "uniform"
    seed: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.sampling not in ("uniform", "contiguous"):
            raise ConfigError("sampling must be 'uniform' or 'contiguous'")
        if self.epochs < 1 or self.batch_size < 1 or self.frames < 1 or self.eval_batch < 1:
            raise ConfigError("epochs, batch_size, frames and eval_batch must be >= 1")
        LrSchedule(self.start_lr, self.peak_lr, self.warmup_epochs, self.epochs, 1, self.floor_lr)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    record_index: int
    run: Run | None  # None: the whole clip (multi-label)
    target: object  # class index (multiclass) or 0/1 vector (multilabel)


def build_samples(manifest: DatasetManifest, split: str, class_ids, task: str, run_threshold: int = 16):
    """Training/evaluation units for one split.

    Multi-class: one unit per qualifying run (label >= 0, length >= threshold);
    a record without frame labels counts as one run of its label. Multi-label:
    one unit per clip.
    """
    index = {cid: i for i, cid in enumerate(class_ids)}
    out = []
    for ri, rec in enumerate(manifest.records):
        if rec.split != split:
            continue
        if task == "multilabel":
            y = np.zeros(len(class_ids), dtype=np.int64)
            for lab in rec.labels:
                if lab not in index:
                    raise ContractError(f"record {rec.id!r}: label {lab} is not in the ethogram")
                y[index[lab]] = 1
            out.append(Sample(rec.id, ri, None, y))
            continue
        if rec.frame_labels is not None:
            runs = [r for r in filter_by_run_length(rec.frame_labels, run_threshold) if r.label >= 0]
        elif rec.frame_count >= run_threshold:
            runs = [Run(rec.labels[0], 0, rec.frame_count)]
        else:
            runs = []
        for r in runs:
            if r.label not in index:
                raise ContractError(f"record {rec.id!r}: label {r.label} is not in the ethogram")
            out.append(Sample(f"{rec.id}:{r.start}", ri, r, index[r.label]))
    return out


def _frame_indices(sample: Sample, n_frames: int, k: int, mode: str, rng):
    if sample.run is None:
        return subsample_uniform(n_frames, k)
    return sample_run(sample.run, k, mode, rng)


def _gather(samples, manifest, cache, k, mode, rng):
    xs = []
    for s in samples:
        rec = manifest.records[s.record_index]
        feats = cache.get(manifest.feature_file(rec))
        xs.append(feats[_frame_indices(s, feats.shape[0], k, mode, rng)])
    return np.stack(xs)


def _targets(samples, task):
    if task == "multiclass":
        return np.array([s.target for s in samples], dtype=np.int64)
    return np.stack([s.target for s in samples])


def task_loss(logits, targets, task):
    return softmax_ce_loss(logits, targets) if task == "multiclass" else bce_loss(logits, targets)


# ---------------------------------------------------------------- prediction


def predict(model: QueryDecoderModel, manifest: DatasetManifest, split: str, config: TrainConfig,
            cache: FeatureCache | None = None):
    """Deterministic logits for every unit of ``split``.

    Returns ``(sample_ids, scores [N, C], labels [N, C])`` with one-hot labels
    for multi-class units.
    """
    cache = cache or FeatureCache()
    samples = build_samples(manifest, split, model.bank.class_ids, config.task, config.run_threshold)
    c = model.num_classes
    if not samples:
        return [], np.zeros((0, c)), np.zeros((0, c), dtype=np.int64)
    chunks = []
    with no_grad():
        for lo in range(0, len(samples), config.eval_batch):
            part = samples[lo:lo + config.eval_batch]
            x = _gather(part, manifest, cache, config.frames, config.sampling, None)
            chunks.append(model.forward(x).data)
    scores = np.concatenate(chunks)
    if config.task == "multiclass":
        labels = np.zeros((len(samples), c), dtype=np.int64)
        labels[np.arange(len(samples)), _targets(samples, "multiclass")] = 1
    else:
        labels = _targets(samples, "multilabel")
    return [s.sample_id for s in samples], scores, labels


def split_metric(scores, labels, task) -> float:
    if len(scores) == 0:
        return float("nan")
    if task == "multiclass":
        return top1_accuracy(scores, labels.argmax(axis=1))
    try:
        return macro_map(scores, labels)["all"]
    except ContractError:
        return float("nan")


# ----------------------------------------------------------------------- fit


@dataclass
class FitResult:
    history: list
    log_path: Path | None = None
    checkpoint_path: Path | None = None


def fit(model: QueryDecoderModel, manifest: DatasetManifest, config: TrainConfig, out_dir=None,
        cache: FeatureCache | None = None, frozen_lm=None, progress=None) -> FitResult:
    """Train ``model`` in place on the manifest's train split.

    Batches are drawn from a seeded permutation each epoch; the learning rate
    follows :func:`lr_at` per optimiser step. If ``frozen_lm`` is given its
    content hash is checked after training. ``progress`` is called with each
    epoch's log row; a truthy return ends training early.
    """
    cache = cache or FeatureCache()
    task = config.task
    if manifest.task != task:
        raise ConfigError(f"manifest task {manifest.task!r} != training task {task!r}")
    samples = build_samples(manifest, "train", model.bank.class_ids, task, config.run_threshold)
    if not samples:
        raise ContractError("train split has no usable samples")
    if task == "multiclass":
        present = {s.target for s in samples}
        empty = [cid for i, cid in enumerate(model.bank.class_ids) if i not in present]
        if empty:
            warnings.warn(f"classes without training samples: {empty}", stacklevel=2)
    lm_hash = frozen_lm.content_hash() if frozen_lm is not None else None

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    sched = LrSchedule(config.start_lr, config.peak_lr, config.warmup_epochs, config.epochs,
                       steps_per_epoch, config.floor_lr)
    opt = AdamW(model.parameters(), config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    has_val = any(r.split == "val" for r in manifest.records)

    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        losses, lr = [], 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[lo:lo + config.batch_size]]
            x = _gather(batch, manifest, cache, config.frames, config.sampling, rng)
            lr = lr_at(step, sched)
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = task_loss(model.forward(x), _targets(batch, task), task)
                    tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(str(exc), step=step) from exc
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        val = float("nan")
        if has_val:
            _, s, y = predict(model, manifest, "val", config, cache)
            val = split_metric(s, y, task)
        row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": float(np.mean(losses)), "val_metric": val}
        history.append(row)
        if progress is not None and progress(row):
            break
        log.debug("epoch %d loss %.6f val %.4f", epoch, row["train_loss"], val)

    if frozen_lm is not None and frozen_lm.content_hash() != lm_hash:
        raise TrainingError("language model weights changed during behaviour training", step=step)

    result = FitResult(history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.log_path = write_log(history, out_dir / "train_log.csv")
        result.checkpoint_path = out_dir / "model.edwt"
        model.save(result.checkpoint_path)
    return result


def write_log(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_HEADER)
        for row in history:
            val = row["val_metric"]
            wr.writerow([row["epoch"], row["step"], repr(float(row["lr"])), repr(float(row["train_loss"])),
                         "" if math.isnan(val) else repr(float(val))])
    return path


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
