"""Command-line entry point: prepare, synth, train, eval, ablate, profile, selftest.

Exit codes: 0 success, 1 runtime failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .backbone import (
    CheckpointError, EncodingMode, init_parameters, load_checkpoint, save_checkpoint,
)
from .datasets import (
    DataError, Dataset, SeasonalSpec, build_sequences, k_core_filter, load_interactions,
    read_processed, window, write_processed, write_synthetic,
)
from .metrics import evaluate, write_metrics
from .profiler import (
    FLOP_CONVENTION, PROFILE_HEADER, count_params, estimate_flops, measure_latency,
)
from .rote_core import ConfigError
from .trainer import TrainingDiverged, train

log = logging.getLogger("rote")


class UsageError(Exception):
    """Bad input, paths or configuration (exit code 2)."""


class RunFailure(Exception):
    """A command started but could not finish (exit code 1)."""


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_data(path) -> Dataset:
    try:
        return read_processed(path)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _check_vocab(model_vocab: int, data_vocab: int, what: str):
    if model_vocab != data_vocab:
        raise RunFailure(f"vocab mismatch: {what} has vocab_size={model_vocab}, dataset has vocab_size={data_vocab}")


# ---------------------------------------------------------------- commands


def cmd_prepare(args, rc: cfgmod.RunConfig) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    try:
        raw = load_interactions(src)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    kept = k_core_filter(raw, rc.k_core)
    dataset = build_sequences(kept)
    if not dataset.sequences:
        raise RunFailure(f"no users left after {rc.k_core}-core filtering of {src}")
    out = Path(rc.out)
    write_processed(dataset, out, n_interactions=sum(len(s) for s in dataset.sequences))
    _write(out / "config.resolved", rc.to_text())
    print(f"prepared {len(dataset.sequences)} users, {dataset.n_items} items -> {out}")
    return 0


def cmd_synth(args, rc: cfgmod.RunConfig) -> int:
    spec = SeasonalSpec(
        n_users=args.users, n_items=args.items, horizon_days=args.horizon_days,
        seed=rc.seed, p_season=args.p_season, p_recent=args.p_recent,
    )
    path = write_synthetic(spec, rc.out)
    print(f"wrote {path}")
    return 0


def _train_one(rc: cfgmod.RunConfig, data: Dataset, mode: EncodingMode, seed: int, out: Path):
    if rc.vocab_size:
        _check_vocab(rc.vocab_size, data.vocab_size, "config")
    mcfg = rc.model_config(data.vocab_size, mode)
    model = init_parameters(mcfg, seed=seed)
    try:
        best, report = train(model, data, rc.train_config(seed))
    except TrainingDiverged as exc:
        raise RunFailure(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out / "model.rote")
    _write(out / "train_report.tsv", report.to_tsv())
    return best, report


def cmd_train(args, rc: cfgmod.RunConfig) -> int:
    data = _load_data(rc.data)
    out = Path(rc.out)
    _, report = _train_one(rc, data, rc.mode, rc.seed, out)
    _write(out / "config.resolved", rc.to_text())
    best = report.epochs[report.best_epoch - 1]
    print(f"best epoch {report.best_epoch}: valid ndcg@10 {best.ndcg10:.4f} -> {out / 'model.rote'}")
    return 0


def cmd_eval(args, rc: cfgmod.RunConfig) -> int:
    out = Path(rc.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.rote"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        model = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UsageError(f"{ckpt}: {exc}") from None
    data = _load_data(rc.data)
    _check_vocab(model.cfg.vocab_size, data.vocab_size, f"checkpoint {ckpt}")
    splits = ("valid", "test") if args.split == "both" else (args.split,)
    results = {
        s: evaluate(model, data, s, rc.max_len, rc.ks, exclude_history=rc.exclude_history)
        for s in splits
    }
    write_metrics(out / "metrics.tsv", results)
    # keep the training run's config.resolved intact
    _write(out / "eval.resolved", rc.to_text())
    for s, m in results.items():
        for row in m.rows(s):
            print(row)
    return 0


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def run_ablation(rc: cfgmod.RunConfig, data: Dataset, out: Path, k: int = 10) -> list[dict]:
    """Train and test every (mode, seed) cell; return one summary row per mode."""
    rows = []
    cells = ["mode\tseed\tbest_epoch\trecall@10\tndcg@10"]
    for mode in rc.modes:
        recalls, ndcgs = [], []
        for seed in rc.seeds:
            cell = out / "cells" / f"{mode.value}-seed{seed}"
            try:
                best, report = _train_one(rc, data, mode, seed, cell)
                m = evaluate(best, data, "test", rc.max_len, (k,), exclude_history=rc.exclude_history)
            except (RunFailure, ValueError, FloatingPointError) as exc:
                raise RunFailure(f"ablation cell mode={mode.label} seed={seed} failed: {exc}") from None
            write_metrics(cell / "metrics.tsv", {"test": m})
            recalls.append(m.recall_at[k])
            ndcgs.append(m.ndcg_at[k])
            cells.append(f"{mode.label}\t{seed}\t{report.best_epoch}\t{m.recall_at[k]:.6f}\t{m.ndcg_at[k]:.6f}")
            log.info("%s seed %d: test ndcg@%d %.4f", mode.label, seed, k, m.ndcg_at[k])
        r_mean, r_std = _mean_std(recalls)
        n_mean, n_std = _mean_std(ndcgs)
        rows.append({
            "mode": mode, "recall_mean": r_mean, "recall_std": r_std,
            "ndcg_mean": n_mean, "ndcg_std": n_std, "n_seeds": len(rc.seeds),
        })
    _write(out / "ablation_cells.tsv", "\n".join(cells) + "\n")
    return rows


ABLATION_HEADER = "method\tR@10\tN@10\tR@10_mean\tR@10_std\tN@10_mean\tN@10_std\tseeds"


def format_ablation(rows: list[dict]) -> str:
    lines = [ABLATION_HEADER]
    for r in rows:
        lines.append(
            f"{r['mode'].label}\t{r['recall_mean']:.4f} ± {r['recall_std']:.4f}"
            f"\t{r['ndcg_mean']:.4f} ± {r['ndcg_std']:.4f}"
            f"\t{r['recall_mean']:.6f}\t{r['recall_std']:.6f}"
            f"\t{r['ndcg_mean']:.6f}\t{r['ndcg_std']:.6f}\t{r['n_seeds']}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args, rc: cfgmod.RunConfig) -> int:
    data = _load_data(rc.data)
    out = Path(rc.out)
    rows = run_ablation(rc, data, out)
    text = format_ablation(rows)
    _write(out / "ablation.tsv", text)
    _write(out / "config.resolved", rc.to_text())
    sys.stdout.write(text)
    return 0


def _profile_batch(vocab_size: int, max_len: int, rows: int, seed: int = 0):
    """Full-length rows of random items on a daily grid, for timing only."""
    from .datasets import SequenceBatch

    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(rows):
        items = rng.integers(1, max(vocab_size, 2), size=max_len)
        days = 16436 + np.cumsum(rng.integers(1, 30, size=max_len))
        parts.append(window(list(items), list(days * 86400), max_len))
    ids, ts, trip, pad = (np.stack(p) for p in zip(*parts))
    return SequenceBatch(ids, trip, ts, pad, np.zeros_like(ids), np.arange(rows))


def cmd_profile(args, rc: cfgmod.RunConfig) -> int:
    vocab = rc.vocab_size
    if not vocab:
        vocab = _load_data(rc.data).vocab_size
    out = Path(rc.out)
    batch = _profile_batch(vocab, rc.max_len, rc.latency_rows)
    lines = [PROFILE_HEADER]
    for mode in rc.modes:
        mcfg = rc.model_config(vocab, mode)
        model = init_parameters(mcfg, seed=rc.seed)
        flops = estimate_flops(mcfg).total
        lat = measure_latency(model, batch, warmup=rc.latency_warmup, reps=rc.latency_reps)
        lines.append(f"{mode.label}\t{count_params(model)}\t{flops}\t{lat.p50_ms:.3f}")
    text = f"# flops: {FLOP_CONVENTION}\n" + "\n".join(lines) + "\n"
    _write(out / "profile.tsv", text)
    _write(out / "config.resolved", rc.to_text())
    sys.stdout.write(text)
    return 0


def cmd_selftest(args, rc: cfgmod.RunConfig) -> int:
    from .selftest import run_all

    results = run_all(echo=print)
    text = "\n".join(r.line() for r in results) + "\n"
    if args.out:
        _write(Path(args.out) / "selftest.tsv", text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", help="encoding mode (pe, ts, y, ym, ymd or full name)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="prepared dataset directory")
    common.add_argument("--max-len", type=int, dest="max_len")
    common.add_argument("--k-core", type=int, dest="k_core")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rote", description="Rotary time embeddings for next-item recommendation.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", parents=[common], help="k-core filter and index a TSV log")
    sp.add_argument("input", help="user<TAB>item<TAB>unix_seconds file")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("synth", parents=[common], help="write a synthetic seasonal log")
    sp.add_argument("--users", type=int, default=SeasonalSpec.n_users)
    sp.add_argument("--items", type=int, default=SeasonalSpec.n_items)
    sp.add_argument("--horizon-days", type=int, default=SeasonalSpec.horizon_days)
    sp.add_argument("--p-season", type=float, default=SeasonalSpec.p_season)
    sp.add_argument("--p-recent", type=float, default=SeasonalSpec.p_recent)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", parents=[common], help="train one model")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", help="defaults to OUT/model.rote")
    sp.add_argument("--split", choices=("valid", "test", "both"), default="both")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", parents=[common], help="train every (mode, seed) pair")
    sp.add_argument("--modes", help="comma-separated modes")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("profile", parents=[common], help="parameters, FLOPs and latency per mode")
    sp.add_argument("--modes", help="comma-separated modes")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    sp.set_defaults(func=cmd_selftest)
    return p


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = cfgmod.parse_value(key.strip(), value)
    if args.mode is not None:
        over["mode"] = cfgmod.parse_value("mode", args.mode)
    for key in ("modes", "seeds"):
        if getattr(args, key, None) is not None:
            over[key] = cfgmod.parse_value(key, getattr(args, key))
    for key in ("seed", "out", "data", "max_len", "k_core"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    return over


def _thread_limit() -> int:
    raw = os.environ.get("ROTE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ROTE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ROTE_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        from threadpoolctl import threadpool_limits

        rc = cfgmod.resolve(args.config, _overrides(args))
        with threadpool_limits(limits=_thread_limit()), np.errstate(all="ignore"):
            return args.func(args, rc)
    except (UsageError, ConfigError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"rote {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RunFailure, DataError, ValueError) as exc:
        print(f"rote {args.command}: failed: {exc}", file=sys.stderr)
        return 1


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
