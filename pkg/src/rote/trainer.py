"""Next-item training loop: cross-entropy, Adam, early stopping on valid NDCG@10."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import Model, forward
from .datasets import Dataset, SequenceBatch, training_batch, train_sequences
from .metrics import evaluate

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    n_negatives: int = 0  # 0 = full softmax
    clip_norm: float = 5.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """In-place Adam update with bias correction."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.learning_rate:
            p.data -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.data.dtype)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recall5: float
    ndcg5: float
    recall10: float
    ndcg10: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    wall_seconds: float = 0.0

    def to_tsv(self) -> str:
        lines = ["epoch\tloss\tvalid_recall@5\tvalid_ndcg@5\tvalid_recall@10\tvalid_ndcg@10\tbest"]
        for r in self.epochs:
            lines.append(
                f"{r.epoch}\t{r.loss:.6f}\t{r.recall5:.6f}\t{r.ndcg5:.6f}"
                f"\t{r.recall10:.6f}\t{r.ndcg10:.6f}\t{int(r.epoch == self.best_epoch)}"
            )
        return "\n".join(lines) + "\n"


def batch_loss(model: Model, batch: SequenceBatch, rng: np.random.Generator, n_negatives: int = 0):
    """Mean next-item cross-entropy over the non-padding target positions."""
    hidden = forward(model, batch, train=True, rng=rng)
    B, L, d = hidden.shape
    where = np.flatnonzero(batch.targets.reshape(-1) > 0)
    if where.size == 0:
        raise ValueError("batch has no target positions")
    rows = ad.embedding_gather(ad.reshape(hidden, (B * L, d)), where)
    targets = batch.targets.reshape(-1)[where]
    table = model["item_emb"]
    if n_negatives <= 0:
        logits = ad.matmul(rows, ad.transpose(table, (1, 0)))
        mask = np.ones(table.shape[0], dtype=bool)
        mask[0] = False
        return ad.cross_entropy_logits(logits, targets, column_mask=mask)
    negs = rng.integers(1, table.shape[0], size=(where.size, n_negatives))
    cand = np.concatenate([targets[:, None], negs], axis=1)
    emb = ad.transpose(ad.embedding_gather(table, cand), (0, 2, 1))
    scores = ad.reshape(ad.matmul(ad.reshape(rows, (where.size, 1, d)), emb), (where.size, cand.shape[1]))
    return ad.cross_entropy_logits(scores, np.zeros(where.size, dtype=np.int64))


def _clip(grads: dict, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def train_step(model: Model, batch: SequenceBatch, state: AdamState, cfg: TrainConfig, rng) -> float:
    model.zero_grad()
    loss = batch_loss(model, batch, rng, cfg.n_negatives)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    loss.backward()
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    if "item_emb" in grads:
        grads["item_emb"][0] = 0.0
    _clip(grads, cfg.clip_norm)
    adam_step(model.params, grads, state, cfg)
    model["item_emb"].data[0] = 0.0
    model.zero_grad()
    return value


def train(model: Model, data: Dataset, cfg: TrainConfig, on_epoch=None) -> tuple[Model, TrainReport]:
    """Train in place; return a copy of the best-validation model and the report."""
    if data.vocab_size != model.cfg.vocab_size:
        raise ValueError(f"dataset vocab {data.vocab_size} != model vocab {model.cfg.vocab_size}")
    seqs = [s for s in train_sequences(data) if len(s) >= 2]
    if not seqs:
        raise ValueError("no user has at least two training events")
    full = training_batch(seqs, model.cfg.max_len)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    report = TrainReport()
    best = model.copy()
    best_score = -1.0
    since_best = 0
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(full))
        losses, weights = [], []
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = full.take(order[lo:lo + cfg.batch_size]).trim()
            value = train_step(model, batch, state, cfg, rng)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, batch {bi}")
            losses.append(value)
            weights.append(int((batch.targets > 0).sum()))
        loss = float(np.average(losses, weights=weights))
        m = evaluate(model, data, "valid", ks=(5, 10))
        rec = EpochRecord(epoch, loss, m.recall_at[5], m.ndcg_at[5], m.recall_at[10], m.ndcg_at[10])
        report.epochs.append(rec)
        if rec.ndcg10 > best_score:
            best_score = rec.ndcg10
            report.best_epoch = epoch
            best = model.copy()
            since_best = 0
        else:
            since_best += 1
        log.info("epoch %d loss %.4f valid ndcg@10 %.4f", epoch, loss, rec.ndcg10)
        if on_epoch is not None:
            on_epoch(rec)
        if since_best >= cfg.patience:
            break
    report.wall_seconds = time.perf_counter() - start
    return best, report
