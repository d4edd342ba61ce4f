"""Flat ``key = value`` run configuration.

Resolution order: built-in defaults, then the config file, then flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .backbone import ABLATION_LADDER, EncodingMode, ModelConfig
from .rote_core import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    data: str = "data"
    out: str = "runs/default"
    k_core: int = 5
    # model
    vocab_size: int = 0  # 0 = take it from the dataset
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
    # training
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    n_negatives: int = 0
    clip_norm: float = 5.0
    # evaluation / ablation / profiling
    ks: tuple[int, ...] = (5, 10)
    exclude_history: bool = False
    modes: tuple[EncodingMode, ...] = ABLATION_LADDER
    seeds: tuple[int, ...] = (1, 2, 3)
    latency_reps: int = 20
    latency_warmup: int = 3
    latency_rows: int = 1

    def model_config(self, vocab_size: int | None = None, mode: EncodingMode | None = None) -> ModelConfig:
        vocab = vocab_size if vocab_size is not None else self.vocab_size
        names = {f.name for f in fields(ModelConfig)} - {"vocab_size", "mode"}
        kw = {n: getattr(self, n) for n in names}
        return ModelConfig(vocab_size=vocab, mode=mode or self.mode, **kw)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)} - {"seed"}
        kw = {n: getattr(self, n) for n in names}
        return TrainConfig(seed=self.seed if seed is None else seed, **kw)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, EncodingMode):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    """Convert the string form of ``key`` to its typed value."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if key == "mode":
            return EncodingMode.parse(text)
        if key == "modes":
            return tuple(EncodingMode.parse(t) for t in _split_list(text))
        if key in ("seeds", "ks"):
            return tuple(int(t) for t in _split_list(text))
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    return text


def _split_list(text: str) -> list[str]:
    items = [t.strip() for t in text.replace(" ", ",").split(",")]
    items = [t for t in items if t]
    if not items:
        raise ValueError("empty list")
    return items


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def resolve(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, overridden by the file at ``path``, overridden by ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        cfg = replace(cfg, **parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if cfg.patience > cfg.max_epochs:
        raise ConfigError(f"patience={cfg.patience} exceeds max_epochs={cfg.max_epochs}")
    if not cfg.modes or not cfg.seeds:
        raise ConfigError("modes and seeds must be non-empty")
    return cfg
