"""SASRec-style causal transformer with switchable temporal encodings."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import SequenceBatch
from .rote_core import ConfigError, RoTEConfig, cos_sin, inverse_frequencies, level_tables, rotation_angles

CHECKPOINT_MAGIC = b"ROTE1"


class EncodingMode(str, Enum):
    PositionalEmbedding = "PositionalEmbedding"
    PureTimestamp = "PureTimestamp"
    YearOnly = "YearOnly"
    YearMonth = "YearMonth"
    YearMonthDay = "YearMonthDay"

    @property
    def rotary(self) -> bool:
        return self is not EncodingMode.PositionalEmbedding

    @property
    def levels(self) -> tuple[str, ...]:
        return _LEVELS[self]

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "EncodingMode":
        key = text.strip()
        for mode in cls:
            if key.lower() in (mode.value.lower(), _LABELS[mode].lower()) or key.lower() in _ALIASES.get(mode, ()):
                return mode
        raise ConfigError(f"unknown encoding mode {text!r}")


_LEVELS = {
    EncodingMode.PositionalEmbedding: (),
    EncodingMode.PureTimestamp: (),
    EncodingMode.YearOnly: ("y",),
    EncodingMode.YearMonth: ("y", "m"),
    EncodingMode.YearMonthDay: ("y", "m", "d"),
}
_LABELS = {
    EncodingMode.PositionalEmbedding: "PositionalEmbedding",
    EncodingMode.PureTimestamp: "PureTimestamp",
    EncodingMode.YearOnly: "Y",
    EncodingMode.YearMonth: "Y+M",
    EncodingMode.YearMonthDay: "Y+M+D",
}
_ALIASES = {
    EncodingMode.PositionalEmbedding: ("pe", "positional", "backbone"),
    EncodingMode.PureTimestamp: ("ts", "timestamp", "pure_timestamp"),
    EncodingMode.YearOnly: ("y", "year"),
    EncodingMode.YearMonth: ("ym", "y+m"),
    EncodingMode.YearMonthDay: ("ymd", "y+m+d", "rote"),
}
ABLATION_LADDER = tuple(EncodingMode)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 50
    dropout_rate: float = 0.2
    mode: EncodingMode = EncodingMode.YearMonthDay
    base_y: float = 1e6
    base_m: float = 1e4
    base_d: float = 1e2
    alpha_y: float = 1.5
    alpha_m: float = 1.0
    alpha_d: float = 0.5
    timestamp_base: float = 1e4
    timestamp_alpha: float = 1.0

    def __post_init__(self):
        if isinstance(self.mode, str) and not isinstance(self.mode, EncodingMode):
            object.__setattr__(self, "mode", EncodingMode.parse(self.mode))
        if self.vocab_size < 1 or self.d_model < 1 or self.n_heads < 1 or self.max_len < 1:
            raise ConfigError("vocab_size, d_model, n_heads and max_len must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.mode.rotary and self.head_dim % 2:
            raise ConfigError(f"rotary modes need an even head_dim, got {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rote(self) -> RoTEConfig:
        return RoTEConfig(
            self.head_dim, self.base_y, self.base_m, self.base_d,
            self.alpha_y, self.alpha_m, self.alpha_d,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v.value if isinstance(v, EncodingMode) else repr(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            if key == "mode":
                kw[key] = EncodingMode.parse(value)
            elif types[key] == "int":
                kw[key] = int(value)
            else:
                kw[key] = float(value)
        return cls(**kw)


class Model:
    """Named parameter tensors in declaration order plus the config."""

    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["item_emb"].dtype

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return Model(self.cfg, OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.params.items()
        ))

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)) for k, v in self.params.items()
        ))


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d = cfg.d_model
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["item_emb"] = (cfg.vocab_size, d)
    if not cfg.mode.rotary:
        shapes["pos_emb"] = (cfg.max_len, d)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (d, d)
            shapes[p + f"attn.b{w}"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, d)
        shapes[p + "ffn.b1"] = (d,)
        shapes[p + "ffn.w2"] = (d, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, 0.02)
        if name == "item_emb":
            data[0] = 0.0
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return Model(cfg, params)


# ---------------------------------------------------------------- forward


def rotary_tables(cfg: ModelConfig, batch: SequenceBatch, dtype):
    """Fused ``[(1.0, cos, sin)]`` tables shaped ``(B, 1, L, head_dim)``.

    Angles and the alpha-weighted level sums are formed in float64 and
    narrowed afterwards; built once per batch and shared by every layer and head.
    """
    if cfg.mode is EncodingMode.PureTimestamp:
        if batch.timestamps is None:
            raise ConfigError("PureTimestamp mode needs raw timestamps in the batch")
        inv = inverse_frequencies(cfg.timestamp_base, cfg.head_dim)
        cos, sin = cos_sin(rotation_angles(batch.timestamps, inv))
        tables = [(cfg.timestamp_alpha, cos, sin)]
    else:
        if batch.triplets is None:
            raise ConfigError(f"{cfg.mode.value} mode needs temporal triplets in the batch")
        tables = level_tables(batch.triplets, cfg.rote, cfg.mode.levels)
    # the fused map sum_l a_l*(x*cos_l + rot(x)*sin_l) is linear in the tables,
    # so the levels collapse into one weighted (cos, sin) pair
    cos = sum(a * c for a, c, _ in tables)
    sin = sum(a * s for a, _, s in tables)
    return [(1.0, cos[:, None].astype(dtype), sin[:, None].astype(dtype))]


def attention_mask(pad: np.ndarray) -> np.ndarray:
    """``(B, 1, L, L)``: causal, no padded keys, but every row keeps its diagonal.

    Padding is a prefix, so real queries never see padded keys; padded queries
    attend to themselves only, which keeps every softmax row non-empty.
    """
    L = pad.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None] & ~pad[:, None, :]
    allowed |= np.eye(L, dtype=bool)[None]
    return allowed[:, None]


def forward(
    model: Model,
    batch: SequenceBatch,
    train: bool = False,
    rng: np.random.Generator | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Final hidden states ``(B, L, d_model)``.

    With ``train=True`` dropout is active and draws from ``rng``. If ``trace``
    is a dict, the pre-softmax attention logits of every layer are stored
    under ``trace["scores"]``.
    """
    cfg = model.cfg
    B, L = batch.ids.shape
    if L > cfg.max_len:
        raise ConfigError(f"batch length {L} exceeds max_len {cfg.max_len}")
    if batch.ids.max(initial=0) >= cfg.vocab_size:
        raise IndexError(f"item id >= vocab_size {cfg.vocab_size}")
    dtype = model.dtype
    rate = cfg.dropout_rate if train else 0.0
    if train and rate and rng is None:
        raise ValueError("training forward needs an rng for dropout")

    def drop(t):
        return ad.dropout(t, rate, rng) if rate else t

    d, H, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    keep = (~batch.pad)[..., None].astype(dtype)
    x = ad.multiply_scalar(ad.embedding_gather(model["item_emb"], batch.ids), math.sqrt(d))
    tables = None
    if cfg.mode.rotary:
        tables = rotary_tables(cfg, batch, dtype)
    else:
        pos = model["pos_emb"]
        x = ad.add(x, pos if L == cfg.max_len else _slice_rows(pos, cfg.max_len - L))
    x = ad.mul(drop(x), keep)
    mask = attention_mask(batch.pad)
    scale = 1.0 / math.sqrt(hd)
    if trace is not None:
        trace["scores"] = []

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, L, H, hd)), (0, 2, 1, 3))

    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = ad.layer_norm(x, model[p + "ln1.gain"], model[p + "ln1.bias"])
        q = heads(ad.add(ad.matmul(h, model[p + "attn.wq"]), model[p + "attn.bq"]))
        k = heads(ad.add(ad.matmul(h, model[p + "attn.wk"]), model[p + "attn.bk"]))
        v = heads(ad.add(ad.matmul(h, model[p + "attn.wv"]), model[p + "attn.bv"]))
        if tables is not None:
            q = ad.rotary_fuse(q, tables)
            k = ad.rotary_fuse(k, tables)
        scores = ad.multiply_scalar(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
        if trace is not None:
            trace["scores"].append(scores.data)
        attn = drop(ad.softmax_lastdim(scores, mask))
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
        x = ad.add(x, ad.add(ad.matmul(ctx, model[p + "attn.wo"]), model[p + "attn.bo"]))
        h = ad.layer_norm(x, model[p + "ln2.gain"], model[p + "ln2.bias"])
        f = drop(ad.relu(ad.add(ad.matmul(h, model[p + "ffn.w1"]), model[p + "ffn.b1"])))
        f = drop(ad.add(ad.matmul(f, model[p + "ffn.w2"]), model[p + "ffn.b2"]))
        x = ad.mul(ad.add(x, f), keep)
    return ad.layer_norm(x, model["final_ln.gain"], model["final_ln.bias"])


def _slice_rows(table: Tensor, start: int) -> Tensor:
    return ad.embedding_gather(table, np.arange(start, table.shape[0]))


def logits(model: Model, hidden: Tensor) -> Tensor:
    """Scores against every item embedding (shared input/output table)."""
    return ad.matmul(hidden, ad.transpose(model["item_emb"], (1, 0)))


def score_items(hidden: np.ndarray, model: Model) -> np.ndarray:
    """Per-item scores for one or more hidden vectors; padding gets ``-inf``."""
    scores = np.asarray(hidden, dtype=np.float64) @ model["item_emb"].data.astype(np.float64).T
    scores[..., 0] = -np.inf
    return scores


def final_hidden(model: Model, batch: SequenceBatch) -> np.ndarray:
    """Hidden state at the last (most recent) position of each row."""
    with ad.no_grad():
        return forward(model, batch).data[:, -1, :]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path):
    """Write ``ROTE1`` header, the config block, then float64 little-endian blobs."""
    cfg_text = model.cfg.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(f"config {len(cfg_text)}\n".encode())
        fh.write(cfg_text)
        fh.write(f"params {len(model.params)}\n".encode())
        for name, t in model.params.items():
            dims = "x".join(str(s) for s in t.shape)
            fh.write(f"{name} {dims}\n".encode())
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, dtype=np.float32) -> Model:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    with fh:
        if fh.readline().rstrip(b"\n") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a ROTE1 checkpoint")
        tag, n = fh.readline().decode().split()
        if tag != "config":
            raise CheckpointError(f"{path}: missing config block")
        cfg = ModelConfig.from_text(fh.read(int(n)).decode("utf-8"))
        tag, count = fh.readline().decode().split()
        expected = parameter_shapes(cfg)
        if tag != "params" or int(count) != len(expected):
            raise CheckpointError(f"{path}: expected {len(expected)} parameters, found {count}")
        params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in expected.items():
            got_name, dims = fh.readline().decode().split()
            got_shape = tuple(int(s) for s in dims.split("x"))
            if got_name != name or got_shape != shape:
                raise CheckpointError(f"{path}: parameter {got_name}{got_shape} does not match config {name}{shape}")
            size = int(np.prod(shape)) * 8
            blob = fh.read(size)
            if len(blob) != size:
                raise CheckpointError(f"{path}: truncated blob for {name}")
            data = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(dtype)
            params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(cfg, params)
