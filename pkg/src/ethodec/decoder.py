"""Ethogram-initialised query bank, the query decoder, and the per-class head.

Each decoder layer refines the query tokens in three residual steps::

    u = q + MHSA(LN1(q))
    v = u + CA(LN2(u), x)
    z = v + MLP(LN3(v))

With ``use_norm=False`` the LN steps vanish and the layer is the literal
residual form. Query rows carry no positional information; row ``c`` of the
bank is always paired with row ``c`` of the classifier.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Tensor, as_tensor, mul, parameter, sum_
from .errors import ConfigError, ContractError
from .features import ToyEncoder, adaptive_pool_1d
from .layers import attention, dense_init, maybe_norm, mlp, ones, set_attention, zeros
from .text import EncoderWeights, embed_text, sidecar_path

SOURCES = ("names", "descriptions")
LM_MODES = ("pt", "ft")


@dataclass
class QueryBank:
    tokens: Tensor  # [C, D]
    class_ids: list
    source: str = "descriptions"
    lm_mode: str = "pt"
    lm_hash: str | None = None

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(self.class_ids):
            raise ContractError(f"query bank has {self.tokens.shape} rows for {len(self.class_ids)} classes")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown query source {self.source!r}")
        if self.lm_mode not in LM_MODES:
            raise ConfigError(f"unknown lm mode {self.lm_mode!r}")

    @property
    def num_classes(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def save(self, path):
        path = Path(path)
        checkpoint.save(path, {"queries": self.tokens.data})
        meta = {"class_ids": self.class_ids, "source": self.source, "lm_mode": self.lm_mode, "lm_hash": self.lm_hash}
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        tensors = checkpoint.load(path)
        if "queries" not in tensors:
            raise ContractError(f"{path}: no 'queries' tensor")
        tokens = tensors["queries"]
        side = sidecar_path(path)
        meta = json.loads(side.read_text()) if side.exists() else {}
        ids = meta.get("class_ids", list(range(tokens.shape[0])))
        return cls(parameter(tokens, "queries"), ids, meta.get("source", "descriptions"),
                   meta.get("lm_mode", "pt"), meta.get("lm_hash"))


def init_queries(ethogram, source: str, lm: EncoderWeights, reduction: str = "mean") -> QueryBank:
    """Row ``c`` embeds the name (or description) of the c-th ethogram entry.

    The LM is only read; the returned tokens are an independent learnable copy.
    """
    if not ethogram:
        raise ConfigError("ethogram is empty")
    if source not in SOURCES:
        raise ConfigError(f"query source must be one of {SOURCES}, got {source!r}")
    seen = set()
    for e in ethogram:
        if e.class_id in seen:
            raise ConfigError(f"duplicate behaviour id {e.class_id}")
        seen.add(e.class_id)
    texts = [e.name if source == "names" else e.description for e in ethogram]
    rows = np.stack([embed_text(t, lm, reduction) for t in texts])
    return QueryBank(parameter(rows, "queries"), [e.class_id for e in ethogram], source, lm.mode, lm.content_hash())


# --------------------------------------------------------------------- layers


_LAYER_KEYS = (
    "ln1.gain", "ln1.bias", "sa.wq", "sa.wk", "sa.wv", "sa.wo",
    "ln2.gain", "ln2.bias", "ca.wq", "ca.wk", "ca.wv", "ca.wo",
    "ln3.gain", "ln3.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


class DecoderLayerWeights:
    """Parameters of one decoder layer, keyed as in ``_LAYER_KEYS``."""

    def __init__(self, params: dict, heads: int, use_norm: bool = True, eps: float = 1e-5):
        missing = [k for k in _LAYER_KEYS if k not in params]
        if missing:
            raise ContractError(f"decoder layer is missing {missing}")
        dim = params["sa.wq"].shape[0]
        if dim % heads:
            raise ContractError(f"head count {heads} does not divide D={dim}")
        self.params = {k: as_tensor(params[k]) for k in _LAYER_KEYS}
        self.heads = heads
        self.use_norm = use_norm
        self.eps = eps

    @classmethod
    def init(cls, dim, heads, rng, mlp_ratio=4, use_norm=True, eps=1e-5):
        p = {}
        for blk in ("sa", "ca"):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{blk}.{w}"] = dense_init(rng, dim, dim)
        for ln in ("ln1", "ln2", "ln3"):
            p[f"{ln}.gain"] = ones(dim)
            p[f"{ln}.bias"] = zeros(dim)
        hidden = mlp_ratio * dim
        p["mlp.w1"] = dense_init(rng, dim, hidden)
        p["mlp.b1"] = zeros(hidden)
        p["mlp.w2"] = dense_init(rng, hidden, dim)
        p["mlp.b2"] = zeros(dim)
        return cls(p, heads, use_norm, eps)

    def __getitem__(self, key):
        return self.params[key]

    @property
    def dim(self):
        return self.params["sa.wq"].shape[0]

    def _norm(self, x, which):
        return maybe_norm(x, self[f"{which}.gain"], self[f"{which}.bias"], self.use_norm, self.eps)


def mhsa_block(q, layer: DecoderLayerWeights):
    h = layer._norm(q, "ln1")
    return set_attention(h, layer["sa.wq"], layer["sa.wk"], layer["sa.wv"], layer["sa.wo"], layer.heads) + q


def cross_attention_block(u, x, layer: DecoderLayerWeights):
    """Queries from ``u [.., C, D]``; keys and values from ``x [.., T, D]``."""
    x = as_tensor(x)
    if x.shape[-2] == 0:
        raise ContractError("cross-attention over an empty feature sequence")
    if x.shape[-1] != u.shape[-1]:
        raise ContractError(f"feature dim {x.shape[-1]} != model dim {u.shape[-1]}")
    h = layer._norm(u, "ln2")
    return attention(h, x, x, layer["ca.wq"], layer["ca.wk"], layer["ca.wv"], layer["ca.wo"], layer.heads) + u


def mlp_block(v, layer: DecoderLayerWeights):
    h = layer._norm(v, "ln3")
    return mlp(h, layer["mlp.w1"], layer["mlp.b1"], layer["mlp.w2"], layer["mlp.b2"]) + v


def decode(queries, x, layers) -> Tensor:
    """Run the query tokens ``[C, D]`` against features ``[T, D]`` or ``[B, T, D]``."""
    if len(layers) < 1:
        raise ContractError("decode needs at least one layer")
    q = as_tensor(queries.tokens if isinstance(queries, QueryBank) else queries)
    x = as_tensor(x)
    if x.ndim == 3 and q.ndim == 2:
        q = q + Tensor(np.zeros((x.shape[0], 1, 1)))
    for layer in layers:
        q = mlp_block(cross_attention_block(mhsa_block(q, layer), x, layer), layer)
    return q


@dataclass
class ClassifierHead:
    weight: Tensor  # [C, D]
    bias: Tensor  # [C]

    @classmethod
    def init(cls, num_classes, dim, rng, scale=1.0):
        w = rng.normal(0.0, scale / np.sqrt(dim), size=(num_classes, dim))
        return cls(parameter(w, "classifier.weight"), zeros(num_classes, "classifier.bias"))


def classify(z, head: ClassifierHead) -> Tensor:
    """``logit_c = <W_c, z_c> + b_c`` for ``z`` of shape ``[.., C, D]``."""
    z = as_tensor(z)
    if z.shape[-2] != head.weight.shape[0] or z.shape[-1] != head.weight.shape[1]:
        raise ContractError(f"decoder output {z.shape} does not pair with classifier {head.weight.shape}")
    return sum_(mul(z, head.weight), axis=-1) + head.bias


# ---------------------------------------------------------------------- model


@dataclass
class DecoderConfig:
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    use_norm: bool = True
    norm_eps: float = 1e-5
    pooled_len: int = 16
    classifier_scale: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        if self.heads < 1 or self.pooled_len < 1 or self.mlp_ratio < 1:
            raise ConfigError("heads, pooled_len and mlp_ratio must be >= 1")


class QueryDecoderModel:
    """Optional toy encoder, temporal pooling, decoder stack, classifier head."""

    def __init__(self, bank: QueryBank, layers, head: ClassifierHead, config: DecoderConfig,
                 encoder: ToyEncoder | None = None):
        if head.weight.shape != bank.tokens.shape:
            raise ContractError("classifier rows must pair with query rows")
        self.bank = bank
        self.layers = list(layers)
        self.head = head
        self.config = config
        self.encoder = encoder

    @classmethod
    def create(cls, bank: QueryBank, config: DecoderConfig = DecoderConfig(), seed: int = 0,
               with_encoder: bool = False, encoder_trainable: bool = True):
        rng = np.random.default_rng(seed)
        d = bank.dim
        layers = [DecoderLayerWeights.init(d, config.heads, rng, config.mlp_ratio, config.use_norm, config.norm_eps)
                  for _ in range(config.depth)]
        head = ClassifierHead.init(bank.num_classes, d, rng, config.classifier_scale)
        enc = ToyEncoder.init(d, rng, encoder_trainable) if with_encoder else None
        return cls(bank, layers, head, config, enc)

    @property
    def num_classes(self):
        return self.bank.num_classes

    @property
    def dim(self):
        return self.bank.dim

    def parameters(self) -> OrderedDict:
        """Trainable tensors by checkpoint name."""
        out = OrderedDict()
        out["queries"] = self.bank.tokens
        for i, layer in enumerate(self.layers):
            for k in _LAYER_KEYS:
                out[f"decoder.{i}.{k}"] = layer[k]
        out["classifier.weight"] = self.head.weight
        out["classifier.bias"] = self.head.bias
        if self.encoder is not None and self.encoder.trainable:
            out.update(self.encoder.parameters())
        return out

    def state(self) -> OrderedDict:
        out = OrderedDict((k, t.data) for k, t in self.parameters().items())
        if self.encoder is not None and not self.encoder.trainable:
            out["encoder.weight"] = self.encoder.weight.data
            out["encoder.bias"] = self.encoder.bias.data
        return out

    def forward(self, x) -> Tensor:
        """Logits ``[C]`` for features ``[T, D]`` or ``[B, C]`` for ``[B, T, D]``."""
        x = adaptive_pool_1d(as_tensor(x), self.config.pooled_len)
        return classify(decode(self.bank, x, self.layers), self.head)

    __call__ = forward

    def forward_frames(self, frames) -> Tensor:
        """Raw frames ``[T, H, W, 3]`` through the toy encoder, then :meth:`forward`."""
        if self.encoder is None:
            raise ContractError("model was built without a frame encoder")
        return self.forward(self.encoder(frames))

    def metadata(self):
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "class_ids": list(self.bank.class_ids),
            "source": self.bank.source,
            "lm_mode": self.bank.lm_mode,
            "lm_hash": self.bank.lm_hash,
            "encoder": None if self.encoder is None else {"trainable": self.encoder.trainable},
            **asdict(self.config),
        }

    def save(self, path):
        path = Path(path)
        checkpoint.save(path, self.state())
        sidecar_path(path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        t = checkpoint.load(path)
        meta = json.loads(sidecar_path(path).read_text())
        cfg = DecoderConfig(**{k: meta[k] for k in DecoderConfig.__dataclass_fields__})
        bank = QueryBank(parameter(t["queries"], "queries"), meta["class_ids"], meta["source"],
                         meta["lm_mode"], meta.get("lm_hash"))
        layers = [
            DecoderLayerWeights({k: parameter(t[f"decoder.{i}.{k}"]) for k in _LAYER_KEYS},
                                cfg.heads, cfg.use_norm, cfg.norm_eps)
            for i in range(cfg.depth)
        ]
        head = ClassifierHead(parameter(t["classifier.weight"]), parameter(t["classifier.bias"]))
        enc = None
        if meta.get("encoder") is not None:
            enc = ToyEncoder(t["encoder.weight"], t["encoder.bias"], meta["encoder"]["trainable"])
        return cls(bank, layers, head, cfg, enc)


def permute_model(model: QueryDecoderModel, perm) -> QueryDecoderModel:
    """Reorder behaviour slots jointly: query rows, classifier rows, class ids."""
    perm = np.asarray(perm)
    bank = QueryBank(parameter(model.bank.tokens.data[perm].copy(), "queries"),
                     [model.bank.class_ids[i] for i in perm], model.bank.source, model.bank.lm_mode,
                     model.bank.lm_hash)
    head = ClassifierHead(parameter(model.head.weight.data[perm].copy()), parameter(model.head.bias.data[perm].copy()))
    return QueryDecoderModel(bank, model.layers, head, model.config, model.encoder)
