"""Interaction-log ingestion, k-core filtering, sequences, splits and batches.

Also hosts the synthetic seasonal generator used by the acceptance experiment.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calendar_time import SECONDS_PER_DAY, days_from_civil, decompose_many, decompose_timestamp

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed input data (bad line, negative timestamp, empty split...)."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    ts: int


@dataclass
class UserSequence:
    user_index: int
    items: list[int]
    timestamps: list[int]

    def __len__(self):
        return len(self.items)

    @property
    def triplets(self) -> np.ndarray:
        return decompose_many(np.asarray(self.timestamps, dtype=np.int64)).reshape(-1, 3)


@dataclass
class Dataset:
    sequences: list[UserSequence]
    item_ids: list[str]  # index i -> original id; index 0 is padding ("")
    user_ids: list[str]
    dropped_users: int = 0

    @property
    def vocab_size(self) -> int:
        return len(self.item_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids) - 1

    def item_index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.item_ids) if i}


@dataclass
class SequenceBatch:
    """Left-padded windows. ``pad`` is True exactly on the padding prefix."""

    ids: np.ndarray  # (B, L) int64
    triplets: np.ndarray  # (B, L, 3) int64
    timestamps: np.ndarray  # (B, L) int64
    pad: np.ndarray  # (B, L) bool
    targets: np.ndarray  # (B, L) int64, 0 where no target; or (B,) for evaluation
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.ids.shape[0]

    def take(self, rows) -> "SequenceBatch":
        return SequenceBatch(
            self.ids[rows], self.triplets[rows], self.timestamps[rows],
            self.pad[rows], self.targets[rows], self.users[rows] if self.users.size else self.users,
        )

    def trim(self) -> "SequenceBatch":
        """Drop leading columns that are padding in every row.

        Padded positions never feed real ones, so outputs at the kept
        positions are unchanged; the right edge stays aligned.
        """
        real = ~self.pad.all(axis=0)
        start = int(np.argmax(real)) if real.any() else self.pad.shape[1] - 1
        if start == 0:
            return self
        cols = slice(start, None)
        targets = self.targets[:, cols] if self.targets.ndim == 2 else self.targets
        return SequenceBatch(
            self.ids[:, cols], self.triplets[:, cols], self.timestamps[:, cols],
            self.pad[:, cols], targets, self.users,
        )


# ---------------------------------------------------------------- ingestion


def parse_interactions(lines: Iterable[str], source: str = "<input>") -> list[Interaction]:
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{source}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        user, item, ts_text = parts
        try:
            ts = int(ts_text)
        except ValueError:
            raise DataError(f"{source}:{lineno}: timestamp {ts_text!r} is not an integer") from None
        if ts < 0:
            raise DataError(f"{source}:{lineno}: pre-epoch timestamp {ts}")
        out.append(Interaction(user, item, ts))
    return out


def load_interactions(path) -> list[Interaction]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    return parse_interactions(text.split("\n"), source=str(path))


def write_interactions(interactions: Sequence[Interaction], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x in interactions:
            fh.write(f"{x.user}\t{x.item}\t{x.ts}\n")


def k_core_filter(interactions: Sequence[Interaction], k: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    current = list(interactions)
    while True:
        users = Counter(x.user for x in current)
        items = Counter(x.item for x in current)
        kept = [x for x in current if users[x.user] >= k and items[x.item] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def build_sequences(interactions: Sequence[Interaction], min_len: int = 3) -> Dataset:
    """Reindex users/items densely and sort each user's events by time (stable).

    Items are numbered from 1 in order of first appearance; users likewise from
    0. Users left with fewer than ``min_len`` events are dropped.
    """
    item_ids = [""]
    item_index: dict[str, int] = {}
    per_user: dict[str, list[tuple[int, int]]] = {}
    for x in interactions:
        if x.item not in item_index:
            item_index[x.item] = len(item_ids)
            item_ids.append(x.item)
        per_user.setdefault(x.user, []).append((x.ts, item_index[x.item]))

    sequences = []
    user_ids = []
    dropped = 0
    for user, events in per_user.items():
        if len(events) < min_len:
            dropped += 1
            continue
        events.sort(key=lambda e: e[0])
        sequences.append(
            UserSequence(len(user_ids), [i for _, i in events], [t for t, _ in events])
        )
        user_ids.append(user)
    if dropped:
        log.warning("dropped %d users with fewer than %d events", dropped, min_len)
    return Dataset(sequences, item_ids, user_ids, dropped)


def leave_one_out_split(seq: UserSequence):
    """``(train, valid, test)``; valid/test are ``(item, ts)`` pairs, train a UserSequence."""
    if len(seq) < 3:
        raise DataError(f"user {seq.user_index}: leave-one-out needs >= 3 events, got {len(seq)}")
    train = UserSequence(seq.user_index, seq.items[:-2], seq.timestamps[:-2])
    valid = (seq.items[-2], seq.timestamps[-2])
    test = (seq.items[-1], seq.timestamps[-1])
    return train, valid, test


def window(items: Sequence[int], timestamps: Sequence[int], max_len: int = 50):
    """Most recent ``max_len`` events, left-padded with id 0 / time 0.

    Returns ``(ids, timestamps, triplets, pad)``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    items = list(items)[-max_len:]
    times = list(timestamps)[-max_len:]
    n_pad = max_len - len(items)
    ids = np.zeros(max_len, dtype=np.int64)
    ts = np.zeros(max_len, dtype=np.int64)
    if items:
        ids[n_pad:] = items
        ts[n_pad:] = times
    pad = np.zeros(max_len, dtype=bool)
    pad[:n_pad] = True
    triplets = decompose_many(ts)
    triplets[pad] = 0
    return ids, ts, triplets, pad


def _stack(rows, targets, users) -> SequenceBatch:
    ids, ts, trip, pad = (np.stack(c) for c in zip(*rows))
    return SequenceBatch(ids, trip, ts, pad, np.asarray(targets, dtype=np.int64), np.asarray(users, dtype=np.int64))


def training_batch(train_seqs: Sequence[UserSequence], max_len: int) -> SequenceBatch:
    """Shifted next-item rows: inputs ``train[:-1]``, targets ``train[1:]``."""
    rows, targets = [], []
    for s in train_seqs:
        row = window(s.items[:-1], s.timestamps[:-1], max_len)
        tgt = np.zeros(max_len, dtype=np.int64)
        nxt = s.items[1:][-max_len:]
        if nxt:
            tgt[max_len - len(nxt):] = nxt
        rows.append(row)
        targets.append(tgt)
    return _stack(rows, targets, [s.user_index for s in train_seqs])


def evaluation_batch(dataset: Dataset, split: str, max_len: int) -> SequenceBatch:
    """One row per user; the target sits in ``targets`` (shape ``(B,)``).

    The valid split reads train events only; the test split reads train+valid.
    """
    if split not in ("valid", "test"):
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    if not dataset.sequences:
        raise DataError("empty split")
    rows, targets, users = [], [], []
    for seq in dataset.sequences:
        train, valid, test = leave_one_out_split(seq)
        if split == "valid":
            rows.append(window(train.items, train.timestamps, max_len))
            targets.append(valid[0])
        else:
            rows.append(window(train.items + [valid[0]], train.timestamps + [valid[1]], max_len))
            targets.append(test[0])
        users.append(seq.user_index)
    return _stack(rows, targets, users)


def train_sequences(dataset: Dataset) -> list[UserSequence]:
    return [leave_one_out_split(s)[0] for s in dataset.sequences]


# ---------------------------------------------------------------- on-disk format


def write_processed(dataset: Dataset, out_dir, n_interactions: int | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "items.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index\titem\n")
        for i, item in enumerate(dataset.item_ids[1:], start=1):
            fh.write(f"{i}\t{item}\n")
    with open(out / "users.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index\tuser\n")
        for i, user in enumerate(dataset.user_ids):
            fh.write(f"{i}\t{user}\n")
    with open(out / "sequences.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset.sequences:
            events = " ".join(f"{i}:{t}" for i, t in zip(s.items, s.timestamps))
            fh.write(f"{s.user_index}\t{events}\n")
    n_users = len(dataset.sequences)
    n_inter = sum(len(s) for s in dataset.sequences) if n_interactions is None else n_interactions
    density = n_inter / (n_users * dataset.n_items) if n_users and dataset.n_items else 0.0
    with open(out / "stats.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("users\titems\tinteractions\tdensity\n")
        fh.write(f"{n_users}\t{dataset.n_items}\t{n_inter}\t{density:.5f}\n")


def _read_table(path: Path) -> list[list[str]]:
    lines = path.read_text(encoding="utf-8").split("\n")
    return [line.split("\t") for line in lines[1:] if line]


def read_processed(data_dir) -> Dataset:
    d = Path(data_dir)
    try:
        items = _read_table(d / "items.tsv")
        users = _read_table(d / "users.tsv")
        seq_lines = (d / "sequences.tsv").read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise DataError(f"cannot read processed dataset in {d}: {exc.strerror or exc}") from None
    item_ids = [""] + [row[1] for row in items]
    user_ids = [row[1] for row in users]
    sequences = []
    for line in seq_lines:
        if not line:
            continue
        idx, events = line.split("\t")
        pairs = [e.split(":") for e in events.split(" ")]
        sequences.append(
            UserSequence(int(idx), [int(i) for i, _ in pairs], [int(t) for _, t in pairs])
        )
    return Dataset(sequences, item_ids, user_ids)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SeasonalSpec:
    """Generator parameters, written next to synthetic data as a sidecar."""

    n_users: int = 2000
    n_items: int = 600
    horizon_days: int = 1460
    seed: int = 0
    p_season: float = 0.6
    p_recent: float = 0.2
    recent_days: int = 7
    tail_fraction: float = 0.2
    min_events: int = 8
    max_events: int = 40
    p_short_gap: float = 0.7
    long_gap_days: tuple[int, int] = (30, 90)
    start_date: tuple[int, int, int] = (2015, 1, 1)

    def groups(self) -> list[list[int]]:
        """Item numbers (1-based) of each month's affinity group."""
        n_seasonal = self.n_items - int(round(self.tail_fraction * self.n_items))
        per = n_seasonal // 12
        return [list(range(1 + g * per, 1 + (g + 1) * per)) for g in range(12)]


def item_name(i: int) -> str:
    return f"i{i:05d}"


def synth_seasonal(spec: SeasonalSpec) -> list[Interaction]:
    """Seasonal event streams where elapsed time, not position, carries signal.

    Each user starts on a random day and emits ``min_events..max_events``
    events. Gaps are 1 day with probability ``p_short_gap`` and otherwise
    uniform in ``long_gap_days``, so position and elapsed time decouple. The
    item at time t comes from the group of t's calendar month with probability
    ``p_season``, from the user's items of the preceding ``recent_days`` with
    probability ``p_recent`` (uniform if there are none), else uniformly from
    the whole catalogue. Rows come out user by user in time order.
    """
    rng = np.random.default_rng(spec.seed)
    groups = spec.groups()
    start_day = days_from_civil(*spec.start_date)
    lo, hi = spec.long_gap_days
    out = []
    for u in range(spec.n_users):
        n_events = int(rng.integers(spec.min_events, spec.max_events + 1))
        day = start_day + int(rng.integers(0, spec.horizon_days))
        history: list[tuple[int, int]] = []
        for _ in range(n_events):
            ts = day * SECONDS_PER_DAY + int(rng.integers(0, SECONDS_PER_DAY))
            r = rng.random()
            if r < spec.p_season:
                group = groups[decompose_timestamp(ts).m % 12]
                item = group[int(rng.integers(len(group)))]
            else:
                recent = [i for t, i in history if ts - t <= spec.recent_days * SECONDS_PER_DAY]
                if r < spec.p_season + spec.p_recent and recent:
                    item = recent[int(rng.integers(len(recent)))]
                else:
                    item = 1 + int(rng.integers(spec.n_items))
            history.append((ts, item))
            out.append(Interaction(f"u{u:05d}", item_name(item), ts))
            if rng.random() < spec.p_short_gap:
                day += 1
            else:
                day += int(rng.integers(lo, hi + 1))
    return out


def write_synthetic(spec: SeasonalSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(synth_seasonal(spec), out / "interactions.tsv")
    sidecar = {k: v for k, v in spec.__dict__.items()}
    (out / "generator.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out / "interactions.tsv"
