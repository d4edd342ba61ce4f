"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` to see the lines
as they happen; they are also repeated in the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from rote import selftest
from rote.backbone import ABLATION_LADDER, EncodingMode
from rote.cli import main, run_ablation
from rote.config import RunConfig
from rote.datasets import SeasonalSpec, build_sequences, k_core_filter, synth_seasonal, write_synthetic
from rote.profiler import measure_latency
from rote.backbone import ModelConfig, init_parameters
from rote.cli import _profile_batch

RESULTS: list[str] = []


def report(capsys, number: int, name: str, passed: bool, detail: str, seconds: float, budget: float | None):
    timing = f"{seconds:.1f}s" + (f" (budget {budget:.0f}s)" if budget else "")
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number} {name}: {detail}; {timing}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def test_criterion_1_rotary_algebra(capsys):
    res, sec = timed(selftest.check_rotary_algebra)
    report(capsys, 1, "rotary algebra", res.passed and sec < 30, res.detail, sec, 30)


def test_criterion_2_calendar_oracle(capsys):
    res, sec = timed(selftest.check_calendar)
    report(capsys, 2, "calendar oracle", res.passed and sec < 10, res.detail, sec, 10)


def test_criterion_3_gradients(capsys):
    res, sec = timed(selftest.check_gradients)
    report(capsys, 3, "gradient correctness", res.passed and sec < 120, res.detail, sec, 120)


def test_criterion_4_parameter_law(capsys):
    res, sec = timed(selftest.check_parameter_law)
    report(capsys, 4, "parameter law", res.passed and sec < 5, res.detail, sec, 5)


def test_criterion_5_flop_overhead(capsys):
    def run():
        res = selftest.check_flop_bound()
        # latency: stability gate and ordering only
        small = init_parameters(ModelConfig(vocab_size=601, d_model=16, n_layers=1))
        big = init_parameters(ModelConfig(vocab_size=601, d_model=128, n_layers=4))
        batch = _profile_batch(601, 50, 8)
        a = measure_latency(big, batch, reps=10).p50_ms
        b = measure_latency(big, batch, reps=10).p50_ms
        s = measure_latency(small, batch, reps=10).p50_ms
        stable = abs(a - b) / a < 0.5
        return res, stable, s < min(a, b)

    (res, stable, ordered), sec = timed(run)
    detail = f"{res.detail} latency_stable={stable} latency_ordered={ordered}"
    report(capsys, 5, "FLOP overhead", res.passed and stable and ordered, detail, sec, None)


def test_criterion_6_ranking_oracle(capsys):
    res, sec = timed(selftest.check_ranking)
    report(capsys, 6, "ranking oracle", res.passed and sec < 30, res.detail, sec, 30)


# synthetic seasonal experiment ------------------------------------------------

EXPERIMENT_SPEC = SeasonalSpec(n_users=2000, n_items=600, p_season=0.6, p_recent=0.2, seed=0)
EXPERIMENT_RUN = RunConfig(
    modes=ABLATION_LADDER, seeds=(1, 2, 3),
    learning_rate=3e-3, max_epochs=15, patience=5,
)


def test_criterion_7_synthetic_seasonal(capsys, tmp_path):
    def run():
        write_synthetic(EXPERIMENT_SPEC, tmp_path / "raw")
        assert main(["prepare", str(tmp_path / "raw" / "interactions.tsv"), "--out", str(tmp_path / "data")]) == 0
        from rote.datasets import read_processed
        data = read_processed(tmp_path / "data")
        rc = replace(EXPERIMENT_RUN, data=str(tmp_path / "data"), out=str(tmp_path / "ablate"))
        return run_ablation(rc, data, tmp_path / "ablate")

    rows, sec = timed(run)
    ndcg = {r["mode"]: r["ndcg_mean"] for r in rows}
    pe, y = ndcg[EncodingMode.PositionalEmbedding], ndcg[EncodingMode.YearOnly]
    ym, ymd = ndcg[EncodingMode.YearMonth], ndcg[EncodingMode.YearMonthDay]
    lift = ymd / pe - 1
    table = " ".join(f"{r['mode'].label}={r['ndcg_mean']:.4f}±{r['ndcg_std']:.4f}" for r in rows)
    monotone = y <= ym <= ymd
    gated = lift >= 0.10 and pe < ymd and y <= ymd and sec < 900
    detail = f"N@10 {table}; lift={lift:+.1%} (need >= +10%); Y<=Y+M<=Y+M+D {monotone} (not gated)"
    report(capsys, 7, "synthetic seasonal experiment", gated, detail, sec, 900)


def test_criterion_8_determinism(capsys, tmp_path):
    def run():
        write_synthetic(SeasonalSpec(n_users=150, n_items=100, seed=11), tmp_path / "raw")
        src = str(tmp_path / "raw" / "interactions.tsv")
        fast = ["--set", "max_epochs=3", "--set", "patience=2", "--seed", "7", "--max-len", "20"]
        files = {}
        for run_id in ("a", "b"):
            base = tmp_path / "rerun"
            assert main(["prepare", src, "--out", str(base / "data")]) == 0
            assert main(["train", "--data", str(base / "data"), "--out", str(base / "run"), *fast]) == 0
            assert main(["eval", "--data", str(base / "data"), "--out", str(base / "run"), *fast]) == 0
            assert main(["selftest", "--out", str(base / "selftest")]) == 0
            files[run_id] = {p.relative_to(base): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}
        return files

    files, sec = timed(run)
    same = files["a"] == files["b"]
    detail = f"{len(files['a'])} artifacts from prepare/train/eval/selftest byte-identical={same}"
    report(capsys, 8, "determinism", same, detail, sec, None)


def test_criterion_9_data_pipeline(capsys):
    res, sec = timed(selftest.check_pipeline)
    report(capsys, 9, "data pipeline", res.passed and sec < 30, res.detail, sec, 30)
