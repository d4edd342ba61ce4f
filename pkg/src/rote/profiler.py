"""Parameter counts, analytic FLOPs and wall-clock latency.

FLOP convention: a multiply-add is 2 FLOPs (so an ``m x k`` by ``k x n``
matmul costs ``2*m*k*n``); every other elementwise arithmetic op, exp, sin
and cos counts 1. Counts are for one sequence of length ``max_len``, with
item scores produced at every position.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import EncodingMode, Model, ModelConfig, forward, logits

FLOP_CONVENTION = "multiply-add = 2 FLOPs; elementwise op/exp/sin/cos = 1 FLOP; one row at max_len"


def count_params(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed form of :func:`count_params`, written independently of the model."""
    d = cfg.d_model
    per_layer = 4 * (d * d + d) + 2 * (d * d + d) + 2 * 2 * d
    total = cfg.vocab_size * d + cfg.n_layers * per_layer + 2 * d
    if not cfg.mode.rotary:
        total += cfg.max_len * d
    return total


def _active_levels(cfg: ModelConfig) -> int:
    if cfg.mode is EncodingMode.PureTimestamp:
        return 1
    return len(cfg.mode.levels)


@dataclass
class FlopReport:
    total: int
    terms: dict[str, int] = field(default_factory=dict)
    convention: str = FLOP_CONVENTION

    @property
    def rotary_overhead(self) -> float:
        rot = self.terms.get("rotary", 0) + self.terms.get("rotary_tables", 0)
        return rot / self.total if self.total else 0.0


def estimate_flops(cfg: ModelConfig) -> FlopReport:
    L, d, H, V = cfg.max_len, cfg.d_model, cfg.n_heads, cfg.vocab_size
    hd = cfg.head_dim
    layer_norm = 8 * L * d  # mean, centre, square, var, rsqrt-mul, gain, bias
    t: dict[str, int] = {}
    t["embedding"] = L * d  # sqrt(d) scaling
    if not cfg.mode.rotary:
        t["positional"] = L * d
    n = cfg.n_layers
    t["layer_norm"] = n * 2 * layer_norm + layer_norm
    t["projections"] = n * 4 * (2 * L * d * d + L * d)
    t["attention_scores"] = n * (2 * L * L * d + L * L * H)  # QK^T + scaling
    t["softmax"] = n * 4 * L * L * H  # max-subtract, exp, sum, divide
    t["attention_context"] = n * 2 * L * L * d
    t["ffn"] = n * (2 * (2 * L * d * d + L * d) + L * d)  # two layers + ReLU
    t["residual"] = n * 2 * L * d
    t["scoring"] = 2 * L * d * V
    levels = _active_levels(cfg)
    if levels and n:
        # per position per layer: levels * 4*d for rotating Q and K, plus the
        # adds that fuse the levels together (Q and K)
        t["rotary"] = n * L * (levels * 4 * d + 2 * (levels - 1) * d)
        # angle, sin, cos once per batch, shared by every layer and head
        t["rotary_tables"] = levels * L * (hd // 2) * 3
    return FlopReport(int(sum(t.values())), t)


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    reps: int


def measure_latency(model: Model, batch, warmup: int = 3, reps: int = 20) -> LatencyStats:
    """Wall-clock of one inference forward (hidden states plus item scores)."""
    if reps < 10:
        raise ValueError("reps must be >= 10")
    from threadpoolctl import threadpool_limits

    samples = []
    with threadpool_limits(limits=1), ad.no_grad():
        for i in range(warmup + reps):
            start = time.perf_counter()
            logits(model, forward(model, batch))
            elapsed = (time.perf_counter() - start) * 1000.0
            if i >= warmup:
                samples.append(elapsed)
    arr = np.asarray(samples)
    return LatencyStats(
        float(arr.mean()), float(statistics.median(samples)),
        float(np.percentile(arr, 95)), reps,
    )


PROFILE_HEADER = "method\tparams\tflops\tlatency_ms_p50"
