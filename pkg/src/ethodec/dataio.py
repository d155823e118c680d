"""Ethogram and manifest files, plus the seeded synthetic dataset generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParseError, ValidationError
from .features import FeatureCache, save_features

SPLITS = ("train", "val", "test")
TASKS = ("multiclass", "multilabel")


@dataclass(frozen=True)
class EthogramEntry:
    class_id: int
    name: str
    description: str


def parse_ethogram(path) -> list[EthogramEntry]:
    """Read ``class_id<TAB>name<TAB>description`` lines in file order.

    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    entries, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t", 2)
            if len(parts) < 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno, path)
            try:
                cid = int(parts[0])
            except ValueError:
                raise ParseError(f"class_id {parts[0]!r} is not an integer", lineno, path) from None
            if cid in seen:
                raise ParseError(f"duplicate class_id {cid} (first defined on line {seen[cid]})", lineno, path)
            name, desc = parts[1].strip(), parts[2].strip()
            if not name:
                raise ParseError("empty behaviour name", lineno, path)
            seen[cid] = lineno
            entries.append(EthogramEntry(cid, name, desc))
    if not entries:
        raise ParseError("ethogram has no entries", None, path)
    return entries


def write_ethogram(entries, path) -> None:
    lines = ["# class_id\tname\tdescription"]
    for e in entries:
        for text in (e.name, e.description):
            if "\t" in text or "\n" in text:
                raise ValidationError(f"class {e.class_id}: tabs and newlines are not allowed in ethogram text")
        lines.append(f"{e.class_id}\t{e.name}\t{e.description}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ManifestRecord:
    id: str
    feature_path: str
    labels: list
    frame_count: int
    split: str
    frame_labels: list | None = None

    def to_json(self, task):
        out = {
            "id": self.id,
            "feature_path": self.feature_path,
            "labels": self.labels[0] if task == "multiclass" else list(self.labels),
            "frame_count": self.frame_count,
            "split": self.split,
        }
        if self.frame_labels is not None:
            out["frame_labels"] = list(self.frame_labels)
        return out


@dataclass
class DatasetManifest:
    records: list
    task: str
    root: Path = field(default_factory=Path)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def feature_file(self, record) -> Path:
        p = Path(record.feature_path)
        return p if p.is_absolute() else self.root / p

    def class_ids(self):
        return sorted({c for r in self.records for c in r.labels})


def _record_from_json(i, obj):
    if not isinstance(obj, dict):
        raise ValidationError(f"record {i}: expected an object")
    missing = [k for k in ("id", "feature_path", "labels", "frame_count", "split") if k not in obj]
    if missing:
        raise ValidationError(f"record {i}: missing field(s) {', '.join(missing)}")
    labels = obj["labels"]
    if isinstance(labels, bool) or not isinstance(labels, (int, list)):
        raise ValidationError(f"record {i}: labels must be an id or a list of ids")
    ids = [labels] if isinstance(labels, int) else labels
    if any(isinstance(c, bool) or not isinstance(c, int) for c in ids):
        raise ValidationError(f"record {i}: labels must be integers")
    if obj["split"] not in SPLITS:
        raise ValidationError(f"record {i}: split {obj['split']!r} not in {SPLITS}")
    if not isinstance(obj["frame_count"], int) or obj["frame_count"] < 1:
        raise ValidationError(f"record {i}: frame_count must be a positive integer")
    frame_labels = obj.get("frame_labels")
    if frame_labels is not None and len(frame_labels) != obj["frame_count"]:
        raise ValidationError(f"record {i}: frame_labels length differs from frame_count")
    rec = ManifestRecord(str(obj["id"]), str(obj["feature_path"]), list(ids), obj["frame_count"], obj["split"], frame_labels)
    return rec, isinstance(labels, int)


def validate_manifest(manifest: DatasetManifest, ethogram=None, strict=False) -> None:
    seen = set()
    known = None if ethogram is None else {e.class_id for e in ethogram}
    for i, r in enumerate(manifest.records):
        if r.id in seen:
            raise ValidationError(f"record {i}: duplicate id {r.id!r}")
        seen.add(r.id)
        if manifest.task == "multiclass" and len(r.labels) != 1:
            raise ValidationError(f"record {i} ({r.id}): multiclass records need exactly one label")
        if manifest.task == "multilabel" and len(set(r.labels)) != len(r.labels):
            raise ValidationError(f"record {i} ({r.id}): repeated label")
        if known is not None:
            bad = [c for c in r.labels if c not in known]
            if bad:
                raise ValidationError(f"record {i} ({r.id}): label(s) {bad} not in ethogram")
        if strict and not manifest.feature_file(r).exists():
            raise ValidationError(f"record {i} ({r.id}): feature file {manifest.feature_file(r)} not found")


def parse_manifest(path, ethogram=None, strict=False) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
    if not isinstance(data, list) or not data:
        raise ValidationError(f"{path}: manifest must be a non-empty list of records")
    records, scalar = [], []
    for i, obj in enumerate(data):
        rec, is_scalar = _record_from_json(i, obj)
        records.append(rec)
        scalar.append(is_scalar)
    if all(scalar):
        task = "multiclass"
    elif not any(scalar):
        task = "multilabel"
    else:
        raise ValidationError(f"{path}: mixes single-id and list labels")
    manifest = DatasetManifest(records, task, path.parent)
    validate_manifest(manifest, ethogram, strict)
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    data = [r.to_json(manifest.task) for r in manifest.records]
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ synthetic

ACTION_WORDS = (
    "climbs", "drums", "feeds", "grooms", "runs", "sits", "walks", "plays",
    "hits", "watches", "chews", "rests", "carries", "hangs", "screams", "nests",
)
_SUBJECTS = ("the chimp", "the animal", "an adult", "a juvenile", "the ape", "an individual")
_TEMPLATES = (
    "{s} {a} , then {b} and {c} .",
    "{s} {a} while it {b} , and later {c} .",
    "first {s} {a} , next {b} , finally {c} .",
    "{s} repeatedly {a} and {b} before it {c} .",
)
_SYLLABLES = ("ka", "vo", "te", "su", "mi", "ra", "lo", "ne", "pi", "du", "zo", "ga", "bi", "fe", "ru", "ha")


@dataclass
class SyntheticSpec:
    classes: int = 12
    dim: int = 256
    head_clips: int = 240  # clips whose (primary) label is class 0
    min_clips: int = 4
    frame_range: tuple = (48, 96)
    noise: float = 0.1
    exponent: float = 2.5
    seed: int = 0
    task: str = "multilabel"
    co_label_prob: float = 0.3
    actions_per_class: int = 3
    signals: np.ndarray | None = None

    def __post_init__(self):
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if self.head_clips < 1 or self.min_clips < 1:
            raise ValidationError("clips per class must be >= 1")
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}")
        if self.classes < 1:
            raise ValidationError("need at least one class")
        lo, hi = self.frame_range
        if not 16 <= lo <= hi:
            raise ValidationError("frame_range must satisfy 16 <= min <= max")
        if self.signals is not None:
            self.signals = np.asarray(self.signals, dtype=np.float64)
            if self.signals.shape != (self.classes, self.dim):
                raise ValidationError(f"signals must have shape {(self.classes, self.dim)}")

    def class_counts(self):
        c = np.arange(1, self.classes + 1, dtype=np.float64)
        return np.maximum(self.min_clips, np.round(self.head_clips * c ** -self.exponent)).astype(int)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    ethogram: list
    signals: np.ndarray
    prose: list
    features: dict  # record id -> [T, D] array

    def feature_cache(self) -> FeatureCache:
        """A cache pre-filled with the in-memory features (no disk reads)."""
        cache = FeatureCache()
        for r in self.manifest.records:
            cache.put(self.manifest.feature_file(r), self.features[r.id])
        return cache


def _pseudo_names(rng, n):
    names = set()
    out = []
    while len(out) < n:
        word = "".join(rng.choice(_SYLLABLES, size=3))
        if word not in names:
            names.add(word)
            out.append(word)
    return out


def _action_sets(rng, n, k):
    if n > 1 and k > len(ACTION_WORDS):
        raise GenerationError("too many actions per class")
    chosen, seen = [], set()
    for _ in range(1000 * n):
        combo = tuple(sorted(rng.choice(len(ACTION_WORDS), size=k, replace=False).tolist()))
        if combo not in seen:
            seen.add(combo)
            chosen.append(combo)
            if len(chosen) == n:
                return chosen
    raise GenerationError(f"cannot draw {n} distinct action combinations")


def _describe(rng, actions):
    words = [ACTION_WORDS[a] for a in actions]
    rng.shuffle(words)
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    subject = _SUBJECTS[int(rng.integers(len(_SUBJECTS)))]
    return template.format(s=subject, a=words[0], b=words[1], c=words[2] if len(words) > 2 else words[-1])


def _runs(rng, total, labels, gap_label=None):
    """Frame labels built from alternating runs; the first run is >= 16 frames."""
    out = []
    first = True
    k = 0
    while len(out) < total:
        lab = labels[k % len(labels)]
        n = int(rng.integers(16, 65)) if first else int(rng.integers(8, 65))
        out.extend([lab] * n)
        first = False
        k += 1
        if gap_label is not None and len(out) < total:
            out.extend([gap_label] * int(rng.integers(8, 25)))
    return np.asarray(out[:total], dtype=np.int64)


def _split_counts(n):
    n_test = max(1, int(round(0.2 * n)))
    n_val = max(1, int(round(0.1 * n))) if n - n_test >= 2 else 0
    return n - n_test - n_val, n_val, n_test


def train_frequencies(manifest: DatasetManifest, num_classes: int) -> np.ndarray:
    """Label occurrences per class in the train split, as proportions."""
    counts = np.zeros(num_classes)
    for r in manifest.split("train"):
        for c in r.labels:
            counts[c] += 1
    total = counts.sum()
    return counts / total if total else counts


def generate_synthetic(spec: SyntheticSpec, out_dir=None) -> SyntheticDataset:
    """Build a long-tailed dataset whose class signals are compositions of actions.

    Each class is described by ``actions_per_class`` action words; its visual
    signal is the normalised sum of per-action random vectors, so behaviours
    that share actions in their descriptions also share visual structure.
    Frame features are the signal of the frame's behaviour plus Gaussian
    noise. With ``out_dir`` set, writes ``ethogram.tsv``, ``prose.txt``,
    ``manifest.json`` and ``features/*.paff``.
    """
    from .metrics import SegmentSpec, assign_segments

    rng = np.random.default_rng(spec.seed)
    c_count, d = spec.classes, spec.dim
    combos = _action_sets(rng, c_count, min(spec.actions_per_class, len(ACTION_WORDS)))
    if spec.signals is None:
        action_vecs = rng.normal(0.0, 1.0, size=(len(ACTION_WORDS), d))
        signals = np.stack([action_vecs[list(cmb)].sum(axis=0) for cmb in combos])
        signals /= np.linalg.norm(signals, axis=1, keepdims=True)
    else:
        signals = spec.signals.copy()
    if len({s.tobytes() for s in signals}) != c_count:
        raise GenerationError("class signals are not distinct")
    names = _pseudo_names(rng, c_count)
    ethogram = [EthogramEntry(c, names[c], _describe(rng, combos[c])) for c in range(c_count)]
    prose = [_describe(rng, combos[int(rng.integers(c_count))]) for _ in range(4 * c_count)]

    counts = spec.class_counts()
    records, feats = [], {}
    serial = 0
    for c in range(c_count):
        n_train, n_val, n_test = _split_counts(int(counts[c]))
        for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
            for _ in range(n):
                rid = f"clip{serial:05d}"
                serial += 1
                total = int(rng.integers(spec.frame_range[0], spec.frame_range[1] + 1))
                if spec.task == "multiclass":
                    labels = [c]
                    frame_labels = _runs(rng, total, [c], gap_label=-1)
                else:
                    labels = [c]
                    # co-occurring behaviours come from more frequent classes,
                    # so tail frequencies stay those of the tail's own clips
                    if c > 0 and rng.random() < spec.co_label_prob:
                        p = np.arange(1, c + 1) ** -spec.exponent
                        labels.append(int(rng.choice(c, p=p / p.sum())))
                    frame_labels = _runs(rng, total, labels)
                x = np.where((frame_labels >= 0)[:, None], signals[np.maximum(frame_labels, 0)], 0.0)
                x = x + rng.normal(0.0, spec.noise, size=x.shape) if spec.noise > 0 else x
                feats[rid] = x
                records.append(ManifestRecord(
                    rid, f"features/{rid}.paff", labels, total, split,
                    frame_labels.tolist() if spec.task == "multiclass" else None,
                ))
    manifest = DatasetManifest(records, spec.task, Path(out_dir) if out_dir else Path())

    segments = assign_segments(train_frequencies(manifest, c_count), SegmentSpec())
    if c_count >= 3:
        missing = {"head", "middle", "tail"} - set(segments)
        if missing:
            raise GenerationError(f"class sizes leave segment(s) {sorted(missing)} empty; adjust exponent or head_clips")

    if out_dir is not None:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        for r in records:
            save_features(out / r.feature_path, feats[r.id])
        write_ethogram(ethogram, out / "ethogram.tsv")
        (out / "prose.txt").write_text("\n".join(prose) + "\n", encoding="utf-8")
        write_manifest(manifest, out / "manifest.json")
    return SyntheticDataset(manifest, ethogram, signals, prose, feats)
