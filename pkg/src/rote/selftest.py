"""Invariant suite behind ``rote selftest``.

Each check returns a :class:`CheckResult`. Oracles here are deliberately
naive (day-by-day calendar walks, full sorts, explicit loops) and share no
code with the paths they check. Output is deterministic: fixed seeds, no
timings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EncodingMode, ModelConfig, init_parameters
from .calendar_time import decompose_timestamp, days_from_civil, civil_from_days
from .datasets import (
    Interaction, SeasonalSpec, UserSequence, build_sequences, evaluation_batch,
    k_core_filter, leave_one_out_split, synth_seasonal, training_batch, train_sequences, window,
)
from .metrics import batch_ranks, metrics_from_ranks, ndcg_at_k, rank_of_target
from .profiler import analytic_param_count, count_params, estimate_flops
from .rote_core import (
    RoTEConfig, apply_rotary, fuse_levels, inverse_frequencies, rotate_half,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.detail}"


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0))
    return float(np.abs(a - b).max(initial=0) / scale) if scale else 0.0


# ---------------------------------------------------------------- oracles


_MONTH_DAYS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)


def calendar_walk(max_day: int) -> list[tuple[int, int, int]]:
    """``(year, month, day)`` for each day index, by stepping one day at a time."""
    year, month, day = 1970, 1, 1
    out = []
    for _ in range(max_day + 1):
        out.append((year, month, day))
        leap = (year % 4 == 0 and year % 100 != 0) or year % 400 == 0
        length = 29 if (month == 2 and leap) else _MONTH_DAYS[month - 1]
        day += 1
        if day > length:
            day, month = 1, month + 1
            if month > 12:
                month, year = 1, year + 1
    return out


def oracle_triplet(seconds: int, walk) -> tuple[int, int, int]:
    n = seconds // 86400
    year, month, _ = walk[n]
    return year - 1970, (year - 1970) * 12 + month - 1, n


def oracle_rank(scores, target: int) -> int:
    order = sorted(range(1, len(scores)), key=lambda j: (-scores[j], j))
    return order.index(target) + 1


# ---------------------------------------------------------------- checks


def check_rotary_algebra(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = {"norm": 0.0, "shift": 0.0, "compose": 0.0, "linear": 0.0}
    ok = True
    dims = (2, 4, 32, 64)
    for t in range(trials):
        hd = dims[t % len(dims)]
        x = rng.standard_normal(hd)
        theta = rng.uniform(-50, 50, hd // 2)
        worst["norm"] = max(worst["norm"], abs(np.linalg.norm(apply_rotary(x, theta)) / np.linalg.norm(x) - 1))
        omega = inverse_frequencies(float(rng.choice([1e2, 1e4, 1e6])), hd)
        a, b = sorted(rng.integers(0, 20000, 2))[::-1]
        q, k = rng.standard_normal(hd), rng.standard_normal(hd)
        lhs = apply_rotary(q, a * omega) @ apply_rotary(k, b * omega)
        rhs = apply_rotary(q, (a - b) * omega) @ k
        worst["shift"] = max(worst["shift"], abs(lhs - rhs) / max(abs(rhs), np.linalg.norm(q) * np.linalg.norm(k)))
        t1, t2 = rng.uniform(-10, 10, (2, hd // 2))
        worst["compose"] = max(worst["compose"], _rel(apply_rotary(apply_rotary(x, t1), t2), apply_rotary(x, t1 + t2)))
        ok &= bool(np.array_equal(rotate_half(rotate_half(x)), -x))
        cfg = RoTEConfig(head_dim=hd)
        trip = tuple(int(v) for v in sorted(rng.integers(0, 30000, 3)))
        y = rng.standard_normal(hd)
        worst["linear"] = max(worst["linear"], _rel(fuse_levels(2 * x + y, trip, cfg), 2 * fuse_levels(x, trip, cfg) + fuse_levels(y, trip, cfg)))
        if np.linalg.norm(fuse_levels(x, trip, cfg)) > 3.0 * np.linalg.norm(x) * (1 + 1e-12):
            ok = False
    for hd in dims:
        for base in (1e2, 1e4, 1e6):
            w = inverse_frequencies(base, hd)
            ok &= bool(w[0] == 1.0 and np.all(np.diff(w) < 0))
        x = rng.standard_normal(hd)
        ok &= bool(np.allclose(fuse_levels(x, (0, 0, 0), RoTEConfig(head_dim=hd)), 3.0 * x, rtol=0, atol=1e-12))
    ok &= worst["norm"] <= 1e-6 and worst["shift"] <= 1e-6 and worst["compose"] <= 1e-8 and worst["linear"] <= 1e-10
    detail = " ".join(f"{k}={v:.2e}" for k, v in worst.items())
    return CheckResult("rotary_algebra", ok, detail)


def check_calendar(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    stamps = [int(s) for s in rng.integers(0, 2_000_000_001, trials)]
    walk = calendar_walk(max(stamps) // 86400 + 1)
    mismatches = sum(tuple(decompose_timestamp(s)) != oracle_triplet(s, walk) for s in stamps)
    anchors = decompose_timestamp(0) == (0, 0, 0) and decompose_timestamp(31536000) == (1, 12, 365)
    roundtrip = all(days_from_civil(*civil_from_days(n)) == n for n in range(0, 36526))
    ok = mismatches == 0 and anchors and roundtrip
    return CheckResult("calendar_oracle", ok, f"mismatches={mismatches} anchors={anchors} roundtrip={roundtrip}")


def _op_cases(rng) -> dict[str, Callable[[], tuple]]:
    def dims(n):
        return tuple(int(v) for v in rng.integers(1, 9, n))

    def away_from_zero(shape):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < 0.05, 0.5, x)

    def matmul_case():
        m, k, n = dims(3)
        w = rng.standard_normal((m, n))
        return (lambda a, b: ad.tensor_sum(ad.mul(ad.matmul(a, b), w))), [rng.standard_normal((m, k)), rng.standard_normal((k, n))], w

    def bmm_case():
        b_, m, k, n = dims(4)
        w = rng.standard_normal((b_, m, n))
        return (lambda a, b: ad.tensor_sum(ad.mul(ad.matmul(a, b), w))), [rng.standard_normal((b_, m, k)), rng.standard_normal((b_, k, n))], w

    def add_case():
        m, n = dims(2)
        w = rng.standard_normal((m, n))
        return (lambda a, b: ad.tensor_sum(ad.mul(ad.add(a, b), w))), [rng.standard_normal((m, n)), rng.standard_normal(n)], w

    def mul_case():
        m, n = dims(2)
        return (lambda a, b: ad.tensor_sum(ad.mul(a, b))), [rng.standard_normal((m, n)), rng.standard_normal((m, n))], None

    def scalar_case():
        m, n = dims(2)
        c = float(rng.standard_normal())
        w = rng.standard_normal((m, n))
        return (lambda a: ad.tensor_sum(ad.mul(ad.multiply_scalar(a, c), w))), [rng.standard_normal((m, n))], w

    def transpose_case():
        a_, b_, c_ = dims(3)
        w = rng.standard_normal((c_, a_, b_))
        return (lambda a: ad.tensor_sum(ad.mul(ad.transpose(a, (2, 0, 1)), w))), [rng.standard_normal((a_, b_, c_))], w

    def reshape_case():
        m, n = dims(2)
        w = rng.standard_normal(m * n)
        return (lambda a: ad.tensor_sum(ad.mul(ad.reshape(a, (m * n,)), w))), [rng.standard_normal((m, n))], w

    def relu_case():
        m, n = dims(2)
        w = rng.standard_normal((m, n))
        return (lambda a: ad.tensor_sum(ad.mul(ad.relu(a), w))), [away_from_zero((m, n))], w

    def softmax_case():
        m, n = dims(2)
        n = max(n, 2)
        mask = rng.random((m, n)) > 0.3
        mask[:, 0] = True
        w = rng.standard_normal((m, n))
        return (lambda a: ad.tensor_sum(ad.mul(ad.softmax_lastdim(a, mask), w))), [rng.standard_normal((m, n))], w

    def layer_norm_case():
        m, n = dims(2)
        n = max(n, 2)
        w = rng.standard_normal((m, n))
        x = rng.standard_normal((m, n))
        # rows must be spread well beyond eps=1e-3, or the difference quotient
        # straddles the normalisation's curvature
        x += np.where(x.std(axis=1, keepdims=True) < 0.3, np.linspace(-1, 1, n), 0.0)
        return (lambda x, g, b: ad.tensor_sum(ad.mul(ad.layer_norm(x, g, b), w))), [x, rng.standard_normal(n), rng.standard_normal(n)], w

    def gather_case():
        v, d, n = dims(3)
        ids = rng.integers(0, v, n)
        w = rng.standard_normal((n, d))
        return (lambda t: ad.tensor_sum(ad.mul(ad.embedding_gather(t, ids), w))), [rng.standard_normal((v, d))], w

    def ce_case():
        n, v = dims(2)
        v = max(v, 2)
        targets = rng.integers(0, v, n)
        weights = rng.random(n) + 0.1
        return (lambda z: ad.cross_entropy_logits(z, targets, weights)), [rng.standard_normal((n, v))], None

    def dropout_case():
        m, n = dims(2)
        seed = int(rng.integers(1 << 30))
        w = rng.standard_normal((m, n))
        return (lambda a: ad.tensor_sum(ad.mul(ad.dropout(a, 0.3, seed), w))), [rng.standard_normal((m, n))], w

    def rotary_case():
        m, half = dims(2)
        hd = 2 * half
        trip = np.sort(rng.integers(0, 30000, (m, 3)), axis=1)
        from .rote_core import level_tables

        tables = level_tables(trip, RoTEConfig(head_dim=hd))
        w = rng.standard_normal((m, hd))
        return (lambda a: ad.tensor_sum(ad.mul(ad.rotary_fuse(a, tables), w))), [rng.standard_normal((m, hd))], w

    return {
        "matmul": matmul_case, "matmul_batched": bmm_case, "add": add_case, "mul": mul_case,
        "multiply_scalar": scalar_case, "transpose": transpose_case, "reshape": reshape_case,
        "relu": relu_case, "softmax_lastdim": softmax_case, "layer_norm": layer_norm_case,
        "embedding_gather": gather_case, "cross_entropy_logits": ce_case, "dropout": dropout_case,
        "rotary_fuse": rotary_case,
    }


def op_gradient_errors(trials: int = 20, seed: int = 0, eps: float = 1e-3) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst = {}
    for name, make in _op_cases(rng).items():
        err = 0.0
        for _ in range(trials):
            f, arrays, _ = make()
            inputs = [Tensor(a.astype(np.float64)) for a in arrays]
            err = max(err, ad.grad_check(f, inputs, eps=eps).max_rel_error)
        worst[name] = err
    return worst


def tiny_backbone_case(mode: EncodingMode, seed: int = 0):
    """One-block float64 model and a 2-row batch of 4-item sequences."""
    from .trainer import batch_loss

    cfg = ModelConfig(vocab_size=7, d_model=8, n_heads=2, n_layers=1, max_len=4, dropout_rate=0.0, mode=mode)
    model = init_parameters(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data += 0.3 * rng.standard_normal(p.shape)
    model["item_emb"].data[0] = 0.0
    day = 86400
    seqs = [
        UserSequence(0, [1, 2, 3, 4, 5], [1_200_000_000 + i * 40 * day for i in range(5)]),
        UserSequence(1, [6, 2, 5], [1_500_000_000, 1_500_000_000 + day, 1_500_000_000 + 400 * day]),
    ]
    batch = training_batch(seqs, cfg.max_len)

    def loss(*tensors):
        for (name, p), t in zip(model.params.items(), tensors):
            model.params[name] = t
        return batch_loss(model, batch, np.random.default_rng(0))

    return model, loss


def backbone_gradient_errors(eps: float = 1e-3) -> dict[str, float]:
    out = {}
    for mode in EncodingMode:
        model, loss = tiny_backbone_case(mode)
        inputs = [Tensor(p.data.copy()) for p in model.params.values()]
        out[mode.value] = ad.grad_check(loss, inputs, eps=eps).max_rel_error
    return out


def check_gradients(tol: float = 1e-4) -> CheckResult:
    errs = {**op_gradient_errors(), **{f"backbone[{k}]": v for k, v in backbone_gradient_errors().items()}}
    worst = max(errs, key=errs.get)
    ok = all(v <= tol for v in errs.values())
    return CheckResult("gradients", ok, f"ops={len(errs)} worst={worst}:{errs[worst]:.2e}")


def check_parameter_law() -> CheckResult:
    ok = True
    n = 0
    for vocab in (1, 50, 601):
        for d, heads in ((8, 2), (32, 2), (16, 4)):
            for layers in (0, 1, 2):
                for L in (4, 50):
                    pe = ModelConfig(vocab, d, heads, layers, L, mode=EncodingMode.PositionalEmbedding)
                    p_pe = count_params(init_parameters(pe))
                    ok &= p_pe == analytic_param_count(pe)
                    for mode in list(EncodingMode)[1:]:
                        cfg = ModelConfig(vocab, d, heads, layers, L, mode=mode)
                        ok &= count_params(init_parameters(cfg)) == p_pe - L * d
                    n += 1
    return CheckResult("parameter_law", bool(ok), f"configs={n}")


def check_flop_bound(vocab_size: int = 601, bound: float = 0.03) -> CheckResult:
    worst = max(
        estimate_flops(ModelConfig(vocab_size, mode=mode)).rotary_overhead
        for mode in list(EncodingMode)[1:]
    )
    return CheckResult("flop_overhead", worst <= bound, f"max_rotary_overhead={worst:.4f}")


def check_ranking(trials: int = 10000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        v = int(rng.integers(2, 30))
        scores = rng.integers(-3, 4, v).astype(float) if rng.random() < 0.5 else rng.standard_normal(v)
        target = int(rng.integers(1, v))
        mismatches += rank_of_target(scores, target) != oracle_rank(list(scores), target)
    # 5-user toy evaluation against a per-user loop
    scores = rng.standard_normal((5, 12))
    targets = rng.integers(1, 12, 5)
    ranks = batch_ranks(scores, targets)
    m = metrics_from_ranks(ranks, (5, 10))
    loop_ok = True
    for k in (5, 10):
        rec = sum(oracle_rank(list(s), int(t)) <= k for s, t in zip(scores, targets)) / 5
        nd = sum(
            (1 / math.log2(r + 1) if r <= k else 0.0)
            for r in (oracle_rank(list(s), int(t)) for s, t in zip(scores, targets))
        ) / 5
        loop_ok &= abs(m.recall_at[k] - rec) < 1e-12 and abs(m.ndcg_at[k] - nd) < 1e-12
    analytic = ndcg_at_k(3, 5) == 0.5
    ok = mismatches == 0 and loop_ok and analytic
    return CheckResult("ranking_oracle", ok, f"mismatches={mismatches} toy={loop_ok} ndcg(3,5)==0.5:{analytic}")


TOY_LOG = [
    ("u1", "b", 100), ("u1", "b", 200), ("u1", "b", 300), ("u1", "c", 400),
    ("u2", "a", 100), ("u2", "a", 200), ("u2", "a", 300), ("u2", "a", 400),
    ("u2", "a", 500), ("u2", "b", 600), ("u2", "b", 700), ("u2", "c", 800),
]


def pipeline_problems(interactions, k: int = 5, max_len: int = 50) -> list[str]:
    problems = []
    kept = k_core_filter(interactions, k)
    users, items = {}, {}
    for x in kept:
        users[x.user] = users.get(x.user, 0) + 1
        items[x.item] = items.get(x.item, 0) + 1
    if any(c < k for c in users.values()) or any(c < k for c in items.values()):
        problems.append("k-core output below k")
    if k_core_filter(kept, k) != kept:
        problems.append("k-core output is not a fixpoint")
    ds = build_sequences(kept)
    valid = evaluation_batch(ds, "valid", max_len) if ds.sequences else None
    for row, seq in enumerate(ds.sequences):
        train, (v_item, _), (t_item, _) = leave_one_out_split(seq)
        if train.items + [v_item, t_item] != seq.items:
            problems.append(f"user {seq.user_index}: split does not cover the sequence")
        ids, ts, trip, pad = window(train.items, train.timestamps, max_len)
        n = min(len(train), max_len)
        if not (pad[: max_len - n].all() and not pad[max_len - n:].any()):
            problems.append(f"user {seq.user_index}: mask is not the padding prefix")
        if (ids[pad] != 0).any() or (trip[pad] != 0).any() or (ids[~pad] < 1).any():
            problems.append(f"user {seq.user_index}: padding content leaked")
        if not np.array_equal(valid.ids[row], ids):
            problems.append(f"user {seq.user_index}: valid input differs from train window")
    if ds.sequences:
        tb = training_batch(train_sequences(ds), max_len)
        for row, seq in enumerate(ds.sequences):
            train = seq.items[:-2]
            real = ~tb.pad[row]
            if list(tb.ids[row][real]) != train[:-1][-max_len:]:
                problems.append(f"user {seq.user_index}: training input is not the train prefix")
            if list(tb.timestamps[row][real]) != seq.timestamps[:-2][:-1][-max_len:]:
                problems.append(f"user {seq.user_index}: training timestamps leak")
            if list(tb.targets[row][tb.targets[row] > 0]) != train[1:][-max_len:]:
                problems.append(f"user {seq.user_index}: training targets reach past the train split")
    return problems


def check_pipeline() -> CheckResult:
    toy = [Interaction(u, i, t) for u, i, t in TOY_LOG]
    toy_kept = k_core_filter(toy, 5)
    toy_ok = sorted((x.user, x.item) for x in toy_kept) == [("u2", "a")] * 5
    synth = synth_seasonal(SeasonalSpec(n_users=200, n_items=120, seed=3))
    problems = pipeline_problems(toy, 5) + pipeline_problems(synth, 5) + pipeline_problems(synth, 2, max_len=10)
    ok = toy_ok and not problems
    return CheckResult("data_pipeline", ok, f"toy_fixpoint={toy_ok} problems={len(problems)}")


CHECKS = (
    check_rotary_algebra,
    check_calendar,
    check_gradients,
    check_parameter_law,
    check_flop_bound,
    check_ranking,
    check_pipeline,
)


def run_all(echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        r = check()
        if echo:
            echo(r.line())
        results.append(r)
    return results
