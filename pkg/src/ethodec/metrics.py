"""Evaluation: top-1, per-class accuracy, average precision, long-tail segments.

Tie-breaking is deterministic everywhere: ``argmax`` picks the lowest class
index, and average precision ranks equal scores by ascending sample index.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import ContractError, ValidationError

SEGMENTS = ("head", "middle", "tail")


@dataclass(frozen=True)
class SegmentSpec:
    head: float = 0.10
    middle: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.middle < self.head < 1.0:
            raise ValidationError("segment thresholds must satisfy 0 < middle < head < 1")


def assign_segments(frequencies, spec: SegmentSpec = SegmentSpec()) -> list[str]:
    """``head`` if f > head, ``middle`` if middle < f <= head, else ``tail``.

    A class at exactly the middle threshold is tail.
    """
    out = []
    for f in np.asarray(frequencies, dtype=np.float64):
        if f > spec.head:
            out.append("head")
        elif f > spec.middle:
            out.append("middle")
        else:
            out.append("tail")
    return out


def _check_rows(logits, true_ids):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    true_ids = np.asarray(true_ids, dtype=np.int64).reshape(-1)
    if logits.shape[0] == 0:
        raise ContractError("no predictions to score")
    if logits.shape[0] != true_ids.shape[0]:
        raise ContractError(f"{logits.shape[0]} prediction rows but {true_ids.shape[0]} labels")
    return logits, true_ids


def top1_accuracy(logits, true_ids) -> float:
    logits, true_ids = _check_rows(logits, true_ids)
    return float(np.mean(logits.argmax(axis=1) == true_ids))


def per_class_accuracy(logits, true_ids, num_classes=None):
    """Per-class top-1 accuracy and support; NaN where a class has no samples."""
    logits, true_ids = _check_rows(logits, true_ids)
    n = logits.shape[1] if num_classes is None else num_classes
    correct = logits.argmax(axis=1) == true_ids
    support = np.bincount(true_ids, minlength=n).astype(np.int64)
    hits = np.bincount(true_ids, weights=correct, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(support > 0, hits / np.maximum(support, 1), np.nan)
    return acc, support


def class_avg_accuracy(logits, true_ids) -> float:
    acc, _ = per_class_accuracy(logits, true_ids)
    return float(np.nanmean(acc))


def average_precision(scores, positives) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks k of positives.

    Returns NaN when there are no positives.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    positives = np.ascontiguousarray(positives, dtype=np.int64).reshape(-1)
    if scores.shape != positives.shape:
        raise ContractError("scores and positives differ in length")
    return float(K.average_precision(scores, positives))


def _mean_defined(values):
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


def macro_map(scores, labels, spec: SegmentSpec = SegmentSpec(), train_frequencies=None) -> dict:
    """Macro mAP over classes with at least one positive, plus segment mAPs.

    Segment mAPs need ``train_frequencies``; a segment without scorable
    classes reports NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ContractError(f"score matrix {scores.shape} and label matrix {labels.shape} must match")
    per_class = np.array([average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])])
    if np.isnan(per_class).all():
        raise ContractError("no class has a positive sample")
    out = {"per_class": per_class, "all": _mean_defined(per_class)}
    if train_frequencies is not None:
        segs = assign_segments(train_frequencies, spec)
        out["segments"] = segs
        for name in SEGMENTS:
            out[name] = _mean_defined([ap for ap, s in zip(per_class, segs) if s == name])
    return out


# -------------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    task: str
    class_ids: list
    names: list
    scores: np.ndarray  # per-class accuracy (multiclass) or AP (multilabel); NaN = undefined
    support: np.ndarray  # evaluation samples with the class
    frequencies: np.ndarray  # train-split proportions
    segments: list
    aggregates: dict = field(default_factory=dict)


def aggregates_from_rows(task, scores, support, segments) -> dict:
    """Recompute the summary numbers from per-class rows alone."""
    scores = np.asarray(scores, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    if task == "multiclass":
        defined = support > 0
        out = {
            "top1": float((scores[defined] * support[defined]).sum() / support[defined].sum()),
            "class_avg": _mean_defined(scores[defined]),
        }
    else:
        out = {"mAP": _mean_defined(scores)}
    for name in SEGMENTS:
        out[name] = _mean_defined([s for s, seg in zip(scores, segments) if seg == name])
    return out


def build_report(task, scores, labels, class_ids, names, frequencies, spec=SegmentSpec()) -> MetricsReport:
    """``labels`` are true ids (multiclass) or a binary matrix (multilabel)."""
    segments = assign_segments(frequencies, spec)
    if task == "multiclass":
        per, support = per_class_accuracy(scores, labels, len(class_ids))
        agg = {"top1": top1_accuracy(scores, labels), "class_avg": class_avg_accuracy(scores, labels)}
    else:
        labels = np.asarray(labels)
        mm = macro_map(scores, labels, spec, frequencies)
        per = mm["per_class"]
        support = labels.sum(axis=0).astype(np.int64)
        agg = {"mAP": mm["all"]}
    for name in SEGMENTS:
        agg[name] = _mean_defined([s for s, seg in zip(per, segments) if seg == name])
    return MetricsReport(task, list(class_ids), list(names), np.asarray(per), np.asarray(support),
                         np.asarray(frequencies, dtype=np.float64), segments, agg)


def _fmt(x):
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def _svg(report: MetricsReport, title: str) -> str:
    w, h, pad = 640, 400, 56
    freqs = np.maximum(report.frequencies, 1e-6)
    lo = math.floor(math.log10(freqs.min()))
    hi = max(lo + 1, math.ceil(math.log10(freqs.max())))

    def px(f):
        return pad + (math.log10(max(f, 1e-6)) - lo) / (hi - lo) * (w - 2 * pad)

    def py(s):
        return h - pad - s * (h - 2 * pad)

    colour = {"head": "#1f77b4", "middle": "#ff7f0e", "tail": "#d62728"}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
    ]
    for e in range(lo, hi + 1):
        x = px(10.0 ** e)
        out.append(f'<text x="{x:.2f}" y="{h - pad + 16}" text-anchor="middle" font-size="10">1e{e}</text>')
    for s in (0.0, 0.5, 1.0):
        out.append(f'<text x="{pad - 6}" y="{py(s) + 3:.2f}" text-anchor="end" font-size="10">{s:g}</text>')
    out.append(f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle" font-size="12">proportion of training data</text>')
    label = "per-class accuracy" if report.task == "multiclass" else "per-class AP"
    out.append(f'<text x="14" y="{h / 2}" transform="rotate(-90 14 {h / 2})" text-anchor="middle" font-size="12">{label}</text>')
    for cid, name, f, s, seg in zip(report.class_ids, report.names, report.frequencies, report.scores, report.segments):
        if math.isnan(s):
            continue
        out.append(
            f'<circle cx="{px(f):.2f}" cy="{py(s):.2f}" r="5" fill="{colour[seg]}" data-class="{cid}">'
            f"<title>{name}: {s:.4f} at {f:.4f}</title></circle>"
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: MetricsReport, out_dir, stem="report") -> tuple[Path, Path]:
    """Write per-class CSV (descending frequency) and an SVG of score vs proportion.

    Classes with an undefined score have an empty ``score`` cell and no point
    in the plot.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    order = sorted(range(len(report.class_ids)), key=lambda i: (-report.frequencies[i], report.class_ids[i]))
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["class_id", "name", "frequency", "support", "score", "segment"])
        for i in order:
            wr.writerow([report.class_ids[i], report.names[i], _fmt(report.frequencies[i]),
                         int(report.support[i]), _fmt(report.scores[i]), report.segments[i]])
    svg_path = out_dir / f"{stem}.svg"
    title = "Class-wise performance vs. proportion of data"
    svg_path.write_text(_svg(report, title), encoding="utf-8")
    summary = {"task": report.task, **{k: (None if math.isnan(v) else v) for k, v in report.aggregates.items()}}
    (out_dir / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, svg_path


def read_report_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "class_id": int(row["class_id"]),
                "name": row["name"],
                "frequency": float(row["frequency"]),
                "support": int(row["support"]),
                "score": float(row["score"]) if row["score"] else float("nan"),
                "segment": row["segment"],
            })
    return rows


# ------------------------------------------------------ prediction interchange


def write_predictions(path, sample_ids, scores, labels) -> None:
    """CSV ``sample_id,class_id,score,label``, one row per (sample, class)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id", "class_id", "score", "label"])
        for i, sid in enumerate(sample_ids):
            for c in range(scores.shape[1]):
                wr.writerow([sid, c, repr(float(scores[i, c])), int(labels[i, c])])


def read_predictions(path):
    """Inverse of :func:`write_predictions`: ``(sample_ids, scores, labels)``.

    Samples keep first-appearance order; every sample must list the same
    contiguous class ids starting at 0.
    """
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "class_id", "score", "label"]:
            raise ValidationError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, cid, score, label = row[0], int(row[1]), float(row[2]), int(row[3])
            except (ValueError, IndexError):
                raise ValidationError(f"{path}:{lineno}: malformed row {row}") from None
            if label not in (0, 1):
                raise ValidationError(f"{path}:{lineno}: label must be 0 or 1")
            if sid not in rows:
                rows[sid] = {}
                order.append(sid)
            rows[sid][cid] = (score, label)
    if not order:
        raise ValidationError(f"{path}: no predictions")
    n_classes = len(rows[order[0]])
    scores = np.empty((len(order), n_classes))
    labels = np.empty((len(order), n_classes), dtype=np.int64)
    for i, sid in enumerate(order):
        if sorted(rows[sid]) != list(range(n_classes)):
            raise ValidationError(f"{path}: sample {sid!r} does not list classes 0..{n_classes - 1}")
        for c, (s, lab) in rows[sid].items():
            scores[i, c] = s
            labels[i, c] = lab
    return order, scores, labels
