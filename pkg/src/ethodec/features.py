"""Video features: toy encoder, temporal pooling, sampling protocols, PAFF files.

Frame features are plain ``float64`` arrays of shape ``[T, D]``. Real data
enters through precomputed PAFF files written by any external backbone;
synthetic end-to-end tests use :class:`ToyEncoder` on raw frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .autodiff import Tensor, as_tensor, matmul, parameter
from .errors import ContractError, FormatError

PAFF_MAGIC = b"PAFF"
PAFF_VERSION = 1
_PAFF_HEADER = struct.Struct("<4sIIIB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, 3], values in [0, 1]
    frame_labels: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ContractError(f"frames must be [T, H, W, 3], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ContractError("a clip needs at least one frame")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
            if self.frame_labels.shape != (self.frames.shape[0],):
                raise ContractError("need exactly one label per frame")

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class ToyEncoder:
    """Per-frame spatial mean over H x W followed by a learned 3 -> D map."""

    weight: Tensor
    bias: Tensor
    trainable: bool = True

    @classmethod
    def init(cls, dim, rng, trainable=True):
        w = rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(3, dim))
        return cls(parameter(w, "encoder.weight"), parameter(np.zeros(dim), "encoder.bias"), trainable)

    @property
    def dim(self):
        return self.weight.shape[1]

    def parameters(self):
        if not self.trainable:
            return {}
        return {"encoder.weight": self.weight, "encoder.bias": self.bias}

    def __call__(self, frames) -> Tensor:
        frames = frames.frames if isinstance(frames, VideoClip) else np.asarray(frames, dtype=np.float64)
        pooled = as_tensor(frames.mean(axis=(-3, -2)))
        return matmul(pooled, self.weight) + self.bias


def encode_video(clip: VideoClip, encoder: ToyEncoder) -> Tensor:
    return encoder(clip)


def pool_bins(length: int, target: int) -> list[tuple[int, int]]:
    """Half-open input ranges ``[floor(i*T/T'), ceil((i+1)*T/T'))`` per output row."""
    if length < 1 or target < 1:
        raise ContractError(f"pooling needs T >= 1 and T' >= 1, got {length}, {target}")
    return [((i * length) // target, -((-(i + 1) * length) // target)) for i in range(target)]


def pooling_matrix(length: int, target: int) -> np.ndarray:
    """Row-stochastic [target, length] matrix; row i averages bin i."""
    out = np.zeros((target, length))
    for i, (lo, hi) in enumerate(pool_bins(length, target)):
        out[i, lo:hi] = 1.0 / (hi - lo)
    return out


def adaptive_pool_1d(x, target: int):
    """Average temporal bins so ``[..., T, D]`` becomes ``[..., target, D]``.

    Accepts a Tensor (differentiable) or an ndarray (returns an ndarray).
    """
    if isinstance(x, Tensor):
        if x.shape[-2] == target:
            return x
        return matmul(pooling_matrix(x.shape[-2], target), x)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] == target:
        return x.copy()
    return pooling_matrix(x.shape[-2], target) @ x


class Run(NamedTuple):
    label: int
    start: int
    length: int


def label_runs(frame_labels) -> list[Run]:
    """Maximal constant-label runs, in frame order."""
    values, starts, lengths = K.run_lengths(np.asarray(frame_labels, dtype=np.int64))
    return [Run(int(v), int(s), int(n)) for v, s, n in zip(values, starts, lengths)]


def filter_by_run_length(frame_labels, threshold: int = 16) -> list[Run]:
    """Runs whose length is at least ``threshold`` frames."""
    return [r for r in label_runs(frame_labels) if r.length >= threshold]


def subsample_uniform(n: int, k: int = 16) -> np.ndarray:
    """Indices ``floor(i * n / k)`` for ``i`` in ``[0, k)``."""
    if n < 1:
        raise ContractError("cannot sample from an empty sequence")
    return (np.arange(k, dtype=np.int64) * n) // k


def sample_run(run: Run, k: int = 16, mode: str = "uniform", rng=None) -> np.ndarray:
    """Frame indices for one ``k``-frame sample inside ``run``.

    ``uniform`` strides over the whole run. ``contiguous`` takes ``k``
    consecutive frames starting at a random offset (``rng`` given) or at the
    centred offset (``rng`` is None); runs shorter than ``k`` fall back to
    uniform.
    """
    if mode == "uniform" or run.length < k:
        return run.start + subsample_uniform(run.length, k)
    if mode != "contiguous":
        raise ContractError(f"unknown sampling mode {mode!r}")
    slack = run.length - k
    offset = slack // 2 if rng is None else int(rng.integers(0, slack + 1))
    return run.start + offset + np.arange(k, dtype=np.int64)


# ------------------------------------------------------------------ PAFF files


def features_to_bytes(x, dtype: int = 2) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ContractError(f"features must be [T, D], got {x.shape}")
    if dtype not in _DTYPES:
        raise ContractError(f"dtype code must be 1 or 2, got {dtype}")
    header = _PAFF_HEADER.pack(PAFF_MAGIC, PAFF_VERSION, x.shape[0], x.shape[1], dtype)
    return header + np.ascontiguousarray(x, dtype=_DTYPES[dtype]).tobytes()


def features_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != PAFF_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {PAFF_MAGIC!r}", offset=0)
    if len(buf) < _PAFF_HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, t, d, code = _PAFF_HEADER.unpack_from(buf)
    if version != PAFF_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=16)
    expected = t * d * _DTYPES[code].itemsize
    payload = len(buf) - _PAFF_HEADER.size
    if payload != expected:
        raise FormatError(
            f"header says T*D = {t}*{d} ({expected} bytes) but payload has {payload} bytes",
            offset=_PAFF_HEADER.size,
        )
    x = np.frombuffer(buf, dtype=_DTYPES[code], offset=_PAFF_HEADER.size).astype(np.float64)
    x = x.reshape(t, d)
    if not np.isfinite(x).all():
        bad = int(np.flatnonzero(~np.isfinite(x.reshape(-1)))[0])
        raise FormatError("non-finite feature value", offset=_PAFF_HEADER.size + bad * _DTYPES[code].itemsize)
    return x


def save_features(path, x, dtype: int = 2) -> None:
    Path(path).write_bytes(features_to_bytes(x, dtype))


def load_features(path) -> np.ndarray:
    return features_from_bytes(Path(path).read_bytes())


@dataclass
class FeatureCache:
    """Loads each PAFF file once per process; keyed by resolved path."""

    _store: dict = field(default_factory=dict)

    def get(self, path) -> np.ndarray:
        key = str(Path(path).resolve())
        if key not in self._store:
            self._store[key] = load_features(key)
        return self._store[key]

    def put(self, path, x) -> None:
        self._store[str(Path(path).resolve())] = np.asarray(x, dtype=np.float64)
