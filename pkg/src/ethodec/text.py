"""Tokeniser, small transformer masked language model, and text embeddings.

The learned positional table is added to the token embeddings as the input
of the first encoder layer; a zero-layer encoder has no positional input and
is exactly a token-embedding lookup.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Tape, Tensor, embedding, log_softmax_rows, no_grad, pick
from .errors import ConfigError, NonFiniteError, TrainingError, ValidationError
from .layers import MASKED, attention, dense_init, layer_norm_rows, mlp, ones, zeros
from .optim import AdamW

PAD, MASK, CLS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[UNK]")
N_SPECIAL = len(SPECIAL_TOKENS)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase, then split on whitespace; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    min_freq: int = 1
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValidationError("vocabulary must start with the four special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def to_json(self):
        return {"tokens": self.tokens[N_SPECIAL:], "min_freq": self.min_freq}

    @classmethod
    def from_json(cls, obj):
        return cls(list(SPECIAL_TOKENS) + list(obj["tokens"]), obj.get("min_freq", 1))


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    if isinstance(corpus, str):
        corpus = [corpus]
    counts = Counter()
    for text in corpus:
        counts.update(split_words(text))
    if not counts:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    kept = sorted(t for t, n in counts.items() if n >= min_freq and t not in SPECIAL_TOKENS)
    return Vocabulary(list(SPECIAL_TOKENS) + kept, min_freq)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 512) -> np.ndarray:
    ids = [CLS] + [vocab.lookup(w) for w in split_words(text)]
    return np.asarray(ids[:max_len], dtype=np.int64)


@dataclass
class MlmConfig:
    mask_prob: float = 0.2
    split: tuple = (0.8, 0.1, 0.1)  # replace with MASK / random token / keep
    depth: int = 2
    heads: int = 4
    dim: int = 256
    max_len: int = 512
    seed: int = 0
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 128
    epochs: int = 100

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"mask split must be three non-negative fractions summing to 1, got {self.split}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


def mask_tokens(seq, cfg: MlmConfig, rng, vocab_size: int):
    """Select MLM targets and corrupt them.

    Every non-special position is selected independently with probability
    ``cfg.mask_prob``; a selected position becomes MASK, a random ordinary
    token, or stays as is, in the proportions of ``cfg.split``. Returns
    ``(masked, positions, targets)``.
    """
    seq = np.asarray(seq, dtype=np.int64)
    maskable = (seq != PAD) & (seq != CLS) & (seq != MASK)
    chosen = (rng.random(seq.shape[0]) < cfg.mask_prob) & maskable
    positions = np.flatnonzero(chosen)
    targets = seq[positions].copy()
    masked = seq.copy()
    if positions.size:
        kind = rng.random(positions.size)
        p_mask, p_rand, _ = cfg.split
        to_mask = kind < p_mask
        to_rand = (kind >= p_mask) & (kind < p_mask + p_rand)
        masked[positions[to_mask]] = MASK
        if vocab_size > N_SPECIAL:
            masked[positions[to_rand]] = rng.integers(N_SPECIAL, vocab_size, size=int(to_rand.sum()))
    return masked, positions, targets


class EncoderWeights:
    """Vocabulary plus named parameter tensors of the text encoder."""

    def __init__(self, vocab: Vocabulary, dim: int, depth: int, heads: int, max_len: int, params: dict):
        self.vocab = vocab
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.max_len = max_len
        self.params = dict(params)
        self.mode = "pt"

    @classmethod
    def init(cls, vocab: Vocabulary, cfg: MlmConfig, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        d = cfg.dim
        p = {
            "tok_emb": Tensor(rng.normal(0.0, d ** -0.5, size=(len(vocab), d)), True),
            "pos_emb": Tensor(rng.normal(0.0, d ** -0.5, size=(cfg.max_len, d)), True),
        }
        for i in range(cfg.depth):
            pre = f"layers.{i}."
            p[pre + "ln1.gain"] = ones(d)
            p[pre + "ln1.bias"] = zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + w] = dense_init(rng, d, d)
            p[pre + "ln2.gain"] = ones(d)
            p[pre + "ln2.bias"] = zeros(d)
            p[pre + "mlp.w1"] = dense_init(rng, d, 4 * d)
            p[pre + "mlp.b1"] = zeros(4 * d)
            p[pre + "mlp.w2"] = dense_init(rng, 4 * d, d)
            p[pre + "mlp.b2"] = zeros(d)
        p["head.ln.gain"] = ones(d)
        p["head.ln.bias"] = zeros(d)
        p["head.bias"] = zeros(len(vocab))
        for name, t in p.items():
            t.name = name
        return cls(vocab, d, cfg.depth, cfg.heads, cfg.max_len, p)

    def copy(self):
        out = EncoderWeights(
            self.vocab, self.dim, self.depth, self.heads, self.max_len,
            {n: Tensor(t.data.copy(), True, n) for n, t in self.params.items()},
        )
        out.mode = self.mode
        return out

    def __getitem__(self, name):
        return self.params[name]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.dim, self.depth, self.heads, self.max_len, self.vocab.tokens]).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def metadata(self):
        return {
            "kind": "text-encoder",
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "max_len": self.max_len,
            "mode": self.mode,
            "vocab": self.vocab.to_json(),
            "content_hash": self.content_hash(),
        }

    def save(self, path):
        path = Path(path)
        checkpoint.save(path, {n: t.data for n, t in self.params.items()})
        sidecar_path(path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta_file = sidecar_path(path)
        if not meta_file.exists():
            raise ValidationError(f"missing encoder sidecar {meta_file}")
        meta = json.loads(meta_file.read_text())
        arrays = checkpoint.load(path)
        params = {n: Tensor(a, True, n) for n, a in arrays.items()}
        out = cls(Vocabulary.from_json(meta["vocab"]), meta["dim"], meta["depth"], meta["heads"], meta["max_len"], params)
        out.mode = meta.get("mode", "pt")
        return out


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def _pad_batch(seqs):
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids


def encode(weights: EncoderWeights, ids) -> Tensor:
    """Final-layer hidden states ``[B, S, D]`` for a padded id batch."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    p = weights.params
    h = embedding(p["tok_emb"], ids)
    if weights.depth == 0:
        return h
    seq_len = ids.shape[1]
    pos = embedding(p["pos_emb"], np.arange(seq_len))
    key_bias = None
    if (ids == PAD).any():
        key_bias = np.where(ids == PAD, MASKED, 0.0)[:, None, None, :]
    h = h + pos
    for i in range(weights.depth):
        pre = f"layers.{i}."
        a = layer_norm_rows(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        h = h + attention(
            a, a, a,
            p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"], p[pre + "attn.wo"],
            weights.heads, key_bias,
        )
        b = layer_norm_rows(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        h = h + mlp(b, p[pre + "mlp.w1"], p[pre + "mlp.b1"], p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    return h


def mlm_logits(weights: EncoderWeights, hidden_rows: Tensor) -> Tensor:
    """Vocabulary logits for ``[N, D]`` hidden rows; output layer tied to ``tok_emb``."""
    p = weights.params
    z = layer_norm_rows(hidden_rows, p["head.ln.gain"], p["head.ln.bias"])
    return z @ p["tok_emb"].T + p["head.bias"]


def _batch_targets(weights, seqs, cfg, rng):
    masked, flat_pos, targets = [], [], []
    width = max(len(s) for s in seqs)
    for row, s in enumerate(seqs):
        m, pos, tgt = mask_tokens(s, cfg, rng, len(weights.vocab))
        masked.append(m)
        flat_pos.append(row * width + pos)
        targets.append(tgt)
    return _pad_batch(masked), np.concatenate(flat_pos), np.concatenate(targets)


def mlm_loss(weights, ids, flat_positions, targets) -> Tensor:
    h = encode(weights, ids)
    rows = embedding(h.reshape(-1, weights.dim), flat_positions)
    return -pick(log_softmax_rows(mlm_logits(weights, rows)), targets).mean()


def mlm_finetune(corpus, cfg: MlmConfig, init: EncoderWeights, log=None) -> EncoderWeights:
    """Continue masked-LM training of ``init`` on ``corpus``; returns new weights.

    Batches are drawn from a seeded permutation each epoch, so the result is
    a pure function of (corpus, cfg, init). Batches that happen to contain no
    targets are skipped without an optimiser step.
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    weights = init.copy()
    weights.mode = "ft"
    seqs = [tokenize(t, weights.vocab, weights.max_len) for t in corpus]
    seqs = [s for s in seqs if len(s) >= 2]
    if not seqs:
        raise ValidationError("no fine-tuning text with at least one token")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(weights.params, weight_decay=cfg.weight_decay)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [seqs[i] for i in order[lo: lo + cfg.batch_size]]
            ids, positions, targets = _batch_targets(weights, batch, cfg, rng)
            if targets.size == 0:
                continue
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = mlm_loss(weights, ids, positions, targets)
                    tape.backward(loss)
                opt.step(cfg.lr)
            except NonFiniteError as exc:
                raise TrainingError(f"masked-LM loss diverged: {exc}", step=step) from exc
            step += 1
            losses.append(loss.item())
        if log is not None:
            log(epoch, float(np.mean(losses)) if losses else float("nan"))
    opt.zero_grad()
    return weights


def mlm_accuracy(weights: EncoderWeights, corpus, mask_prob=0.2, rounds=5, seed=0) -> float:
    """Fraction of masked positions whose original token is the top prediction.

    Every selected position is replaced by MASK (no random/keep corruption).
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    cfg = MlmConfig(mask_prob=mask_prob, split=(1.0, 0.0, 0.0), dim=weights.dim, heads=weights.heads)
    seqs = [s for s in (tokenize(t, weights.vocab, weights.max_len) for t in corpus) if len(s) >= 2]
    rng = np.random.default_rng(seed)
    hit = total = 0
    with no_grad():
        for _ in range(rounds):
            ids, positions, targets = _batch_targets(weights, seqs, cfg, rng)
            if targets.size == 0:
                continue
            rows = embedding(encode(weights, ids).reshape(-1, weights.dim), positions)
            pred = mlm_logits(weights, rows).data.argmax(axis=1)
            hit += int((pred == targets).sum())
            total += targets.size
    return hit / total if total else float("nan")


def embed_text(text: str, weights: EncoderWeights, reduction: str = "mean") -> np.ndarray:
    """One D-vector for ``text`` from the final-layer states.

    ``mean`` averages the states of every token after CLS (falling back to the
    CLS state when the text has no tokens); ``cls`` takes the CLS state.
    """
    if reduction not in ("mean", "cls"):
        raise ConfigError(f"reduction must be 'mean' or 'cls', got {reduction!r}")
    ids = tokenize(text, weights.vocab, weights.max_len)
    with no_grad():
        h = encode(weights, ids[None, :]).data[0]
    if reduction == "cls" or len(ids) == 1:
        return h[0].copy()
    return h[1:].mean(axis=0)


def config_dict(cfg: MlmConfig):
    d = asdict(cfg)
    d["split"] = list(cfg.split)
    return d
