import math

import numpy as np
import pytest

from rote import autodiff as ad
from rote.backbone import ABLATION_LADDER, ModelConfig, init_parameters
from rote.datasets import (
    Dataset, SeasonalSpec, UserSequence, build_sequences, k_core_filter, synth_seasonal,
    training_batch, train_sequences,
)
from rote.trainer import AdamState, TrainConfig, TrainingDiverged, adam_step, batch_loss, train


def adam_hand_trace(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_single_parameter_trace():
    p = {"w": ad.Tensor(np.array([0.0]))}
    state, cfg = AdamState(), TrainConfig(learning_rate=0.01, max_epochs=1, patience=1)
    grads = [0.5, -0.2, 1.5, 0.0]
    for g in grads:
        adam_step(p, {"w": np.array([g])}, state, cfg)
    assert p["w"].data[0] == pytest.approx(adam_hand_trace(grads, 0.01), rel=1e-12)
    # the first step moves by lr regardless of gradient scale
    q = {"w": ad.Tensor(np.array([0.0]))}
    adam_step(q, {"w": np.array([123.0])}, AdamState(), cfg)
    assert q["w"].data[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_zero_grad_and_symmetry():
    cfg = TrainConfig(learning_rate=0.1, max_epochs=1, patience=1)
    p = {"a": ad.Tensor(np.array([1.0, 2.0])), "b": ad.Tensor(np.array([1.0, 2.0]))}
    state = AdamState()
    adam_step(p, {"a": np.array([0.3, -0.3]), "b": np.array([0.3, -0.3])}, state, cfg)
    assert np.array_equal(p["a"].data, p["b"].data)
    before = p["a"].data.copy()
    m_before = state.m["a"].copy()
    z = {"a": ad.Tensor(before.copy())}
    zs = AdamState()
    adam_step(z, {"a": np.zeros(2)}, zs, cfg)
    assert np.array_equal(z["a"].data, before)
    adam_step(p, {}, state, cfg)
    assert np.allclose(state.m["a"], 0.9 * m_before)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=5, patience=6)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


def tiny_data():
    return build_sequences(k_core_filter(synth_seasonal(SeasonalSpec(n_users=80, n_items=60, seed=2)), 3))


def test_learning_rate_zero_keeps_parameters():
    data = tiny_data()
    model = init_parameters(ModelConfig(vocab_size=data.vocab_size, d_model=8, n_heads=2, max_len=10), seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    best, report = train(model, data, TrainConfig(learning_rate=0.0, max_epochs=2, patience=2))
    for k, v in model.params.items():
        assert np.array_equal(v.data, before[k]), k
        assert np.array_equal(best[k].data, before[k]), k


def test_same_seed_same_report():
    data = tiny_data()
    reports = []
    for _ in range(2):
        model = init_parameters(ModelConfig(vocab_size=data.vocab_size, d_model=8, n_heads=2, max_len=10), seed=1)
        _, rep = train(model, data, TrainConfig(max_epochs=3, patience=3, seed=4))
        reports.append(rep.to_tsv())
    assert reports[0] == reports[1]


def test_best_epoch_is_argmax():
    data = tiny_data()
    model = init_parameters(ModelConfig(vocab_size=data.vocab_size, d_model=8, n_heads=2, max_len=10), seed=1)
    _, rep = train(model, data, TrainConfig(learning_rate=3e-3, max_epochs=6, patience=2, seed=4))
    best = rep.epochs[rep.best_epoch - 1].ndcg10
    assert all(best >= e.ndcg10 for e in rep.epochs)
    assert len(rep.epochs) <= 6
    assert rep.to_tsv().count("\n") == len(rep.epochs) + 1


def test_memorises_a_single_user():
    seq = UserSequence(0, [1, 2, 3, 1, 2], [0, 86400, 2 * 86400, 3 * 86400, 4 * 86400])
    data = Dataset([seq], ["", "a", "b", "c"], ["u"])
    cfg = ModelConfig(vocab_size=4, d_model=16, n_heads=2, n_layers=1, max_len=5, dropout_rate=0.0)
    model = init_parameters(cfg, seed=0)
    train(model, data, TrainConfig(learning_rate=1e-2, max_epochs=200, patience=200, seed=0))
    batch = training_batch(train_sequences(data), cfg.max_len)
    with ad.no_grad():
        from rote.backbone import forward, logits
        z = logits(model, forward(model, batch)).data[0, -1].astype(np.float64)
    z[0] = -np.inf
    target = batch.targets[0, -1]
    loss = -(z[target] - np.log(np.exp(z - z.max()).sum()) - z.max())
    assert loss < 0.1


def test_padding_positions_get_no_gradient():
    data = tiny_data()
    cfg = ModelConfig(vocab_size=data.vocab_size, d_model=8, n_heads=2, max_len=40, dropout_rate=0.0)
    model = init_parameters(cfg, seed=0, dtype=np.float64)
    batch = training_batch(train_sequences(data)[:4], cfg.max_len)
    assert batch.pad.any()
    loss = batch_loss(model, batch, np.random.default_rng(0))
    loss.backward()
    # padding id 0 is only read at padding positions, whose outputs never feed the loss
    assert np.all(model["item_emb"].grad[0] == 0)


def test_divergence_reports_epoch_and_batch():
    data = tiny_data()
    model = init_parameters(ModelConfig(vocab_size=data.vocab_size, d_model=8, n_heads=2, max_len=10), seed=0)
    model["final_ln.gain"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match=r"epoch 1, batch 0"):
        train(model, data, TrainConfig(max_epochs=2, patience=1))


def test_vocab_mismatch_rejected():
    data = tiny_data()
    model = init_parameters(ModelConfig(vocab_size=data.vocab_size + 1, d_model=8, n_heads=2, max_len=10))
    with pytest.raises(ValueError, match="vocab"):
        train(model, data, TrainConfig(max_epochs=1, patience=1))


def test_sampled_negative_loss_runs():
    data = tiny_data()
    model = init_parameters(ModelConfig(vocab_size=data.vocab_size, d_model=8, n_heads=2, max_len=10), seed=0)
    _, rep = train(model, data, TrainConfig(max_epochs=2, patience=2, n_negatives=5))
    assert all(np.isfinite(e.loss) for e in rep.epochs)


@pytest.mark.parametrize("mode", ABLATION_LADDER)
def test_loss_falls_over_five_epochs(mode):
    data = build_sequences(k_core_filter(synth_seasonal(SeasonalSpec(n_users=300, n_items=120, seed=0)), 5))
    model = init_parameters(ModelConfig(vocab_size=data.vocab_size, max_len=20, mode=mode), seed=0)
    _, rep = train(model, data, TrainConfig(max_epochs=5, patience=5, seed=0))
    losses = [e.loss for e in rep.epochs]
    assert losses[-1] < losses[0]
