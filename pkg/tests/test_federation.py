"""Round mechanics: broadcast, local SGD, aggregation, strategy weighting."""

import logging

import numpy as np
import pytest

from celm.config import DataConfig, ExperimentConfig
from celm.data import Dataset, PartitionSpec, synth_dataset
from celm.estimator import ContributionState
from celm.experiment import read_trace_csv, run_experiment, write_trace_csv
from celm.federation import (FederationState, RoundConfig, Strategy, aggregate, broadcast,
                             celm_strategy, cgsv_weights, cosine_alignment, evaluate,
                             local_train, lr_at_round, run_round, uniform_strategy)
from celm.nn import DenseLayer, MlpModel, forward, init_mlp, parameter_checksum, softmax
from celm.probe import ProbeBank, ProbeConfig
from celm.rng import substream


def make_state(n_clients=3, dims=(4, 6, 3), seed=0):
    global_model = init_mlp(list(dims), np.random.default_rng(seed))
    return FederationState(global_model, [global_model.copy() for _ in range(n_clients)])


# ---------------------------------------------------------------------------
# broadcast
# ---------------------------------------------------------------------------

def test_full_broadcast_copies_everything():
    state = make_state()
    for client in state.client_models:
        client.layers[0].weights += 1.0
        client.layers[1].bias -= 2.0
    broadcast(state, warmup=False)
    ref = parameter_checksum(state.global_model)
    assert all(parameter_checksum(c) == ref for c in state.client_models)


def test_warmup_broadcast_preserves_heads():
    state = make_state()
    heads_before = [c.layers[-1].weights.copy() for c in state.client_models]
    for client in state.client_models:
        client.layers[0].weights += 1.0  # stale backbone to overwrite
    broadcast(state, warmup=True)
    for client, head in zip(state.client_models, heads_before):
        assert np.array_equal(client.layers[-1].weights, head)
        assert np.array_equal(client.layers[0].weights, state.global_model.layers[0].weights)


def test_warmup_broadcast_touches_exactly_the_backbone():
    state = make_state(n_clients=1, dims=(4, 5, 3))
    client = state.client_models[0]
    client.layers[0].weights += 0.5
    client.layers[1].weights += 0.5
    before_head = parameter_checksum(MlpModel([client.layers[1]]))
    broadcast(state, warmup=True)
    assert parameter_checksum(MlpModel([client.layers[0]])) == \
        parameter_checksum(MlpModel([state.global_model.layers[0]]))
    assert parameter_checksum(MlpModel([client.layers[1]])) == before_head


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------

def test_zero_learning_rate_changes_nothing():
    ds = synth_dataset(3, 40, 4, seed=1)
    model = init_mlp([4, 3], np.random.default_rng(2))
    before = parameter_checksum(model)
    cfg = RoundConfig(total_rounds=1, client_lr=0.0)
    local_train(model, ds, cfg, 1, substream(0, "shuffle", 1, 0))
    assert parameter_checksum(model) == before


def test_single_batch_matches_hand_backprop():
    w = np.array([[0.2, -0.1], [0.0, 0.3]])
    b = np.array([0.1, -0.2])
    model = MlpModel([DenseLayer(w.copy(), b.copy())])
    x = np.array([[1.0, 2.0], [0.5, -1.0]])
    labels = np.array([1, 2])
    ds = Dataset(x, labels, 2)

    # Hand gradient: dlogits = (softmax - onehot)/B; dW = dlogits^T X; db = sum.
    logits = x @ w.T + b
    p = softmax(logits)
    p[np.arange(2), labels - 1] -= 1.0
    p /= 2
    dw, db = p.T @ x, p.sum(axis=0)
    lr = 0.5
    cfg = RoundConfig(total_rounds=1, client_lr=lr, batch_size=8)
    local_train(model, ds, cfg, 1, substream(0, "shuffle", 1, 0))
    assert np.allclose(model.layers[0].weights, w - lr * dw, atol=1e-12)
    assert np.allclose(model.layers[0].bias, b - lr * db, atol=1e-12)


def test_epoch_reduces_training_loss_on_separable_data():
    from celm.nn import loss_and_param_grad

    for seed in range(5):
        ds = synth_dataset(4, 100, 8, seed=seed)
        model = init_mlp([8, 12, 4], np.random.default_rng(seed))
        before, _ = loss_and_param_grad(model, ds.inputs, ds.labels)
        cfg = RoundConfig(total_rounds=1, client_lr=0.1)
        local_train(model, ds, cfg, 1, substream(seed, "shuffle", 1, 0))
        after, _ = loss_and_param_grad(model, ds.inputs, ds.labels)
        assert after < before


def test_empty_dataset_skips_with_warning(caplog):
    ds = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 3)
    model = init_mlp([4, 3], np.random.default_rng(0))
    before = parameter_checksum(model)
    with caplog.at_level(logging.WARNING):
        local_train(model, ds, RoundConfig(total_rounds=1), 1, substream(0, "shuffle", 1, 0))
    assert parameter_checksum(model) == before
    assert any("empty" in rec.message for rec in caplog.records)


def test_lr_schedule_decays_by_factor():
    cfg = RoundConfig(total_rounds=100, client_lr=0.1, lr_decay_round=50)
    assert lr_at_round(cfg, 50) == 0.1
    assert lr_at_round(cfg, 51) == pytest.approx(0.01, abs=1e-15)
    flat = RoundConfig(total_rounds=100, client_lr=0.1)
    assert lr_at_round(flat, 99) == 0.1


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_aggregate_identical_clients_is_identity():
    model = init_mlp([3, 4, 2], np.random.default_rng(1))
    clients = [model.copy() for _ in range(3)]
    agg = aggregate(clients, np.array([0.2, 0.5, 0.3]))
    for got, want in zip(agg.parameters(), model.parameters()):
        assert np.allclose(got, want, rtol=1e-12, atol=1e-15)


def test_aggregate_one_hot_is_bitwise_copy():
    clients = [init_mlp([3, 2], np.random.default_rng(s)) for s in range(3)]
    agg = aggregate(clients, np.array([0.0, 1.0, 0.0]))
    assert parameter_checksum(agg) == parameter_checksum(clients[1])


def test_aggregate_scalar_arithmetic():
    a = MlpModel([DenseLayer(np.array([[1.0]]), np.array([0.0]))])
    b = MlpModel([DenseLayer(np.array([[3.0]]), np.array([0.0]))])
    agg = aggregate([a, b], np.array([0.25, 0.75]))
    assert agg.layers[0].weights[0, 0] == 2.5


def test_aggregate_rejects_off_simplex_weights():
    clients = [init_mlp([2, 2], np.random.default_rng(s)) for s in range(2)]
    with pytest.raises(ValueError):
        aggregate(clients, np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        aggregate(clients, np.array([-0.2, 1.2]))


# ---------------------------------------------------------------------------
# CGSV weighting
# ---------------------------------------------------------------------------

def test_cosine_alignment_parallel_and_orthogonal():
    deltas = np.array([[2.0, 0.0], [0.0, 3.0]])
    mean = np.array([1.0, 0.0])
    cos = cosine_alignment(deltas, mean)
    assert np.allclose(cos, [1.0, 0.0], atol=1e-12)
    assert np.allclose(cgsv_weights(deltas, mean), [1.0, 0.0], atol=1e-12)


def test_cgsv_clamps_negative_alignment():
    deltas = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 1.0]])
    weights = cgsv_weights(deltas)
    assert weights[1] == 0.0
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert (weights >= 0).all()


def test_cgsv_zero_norm_delta_gets_zero_cosine():
    deltas = np.array([[1.0, 0.0], [0.0, 0.0]])
    cos = cosine_alignment(deltas)
    assert cos[1] == 0.0


def test_cgsv_uniform_fallback_when_nothing_aligns(caplog):
    deltas = np.array([[1.0, 0.0], [-1.0, 0.0]])  # mean is zero
    with caplog.at_level(logging.WARNING):
        weights = cgsv_weights(deltas)
    assert np.array_equal(weights, [0.5, 0.5])


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------

def client_data(n=3, seed=0, classes=3, dim=4):
    ds = synth_dataset(classes, 60, dim, seed=seed)
    from celm.data import partition

    parts, _ = partition(ds, PartitionSpec("iid", n, seed=seed))
    return parts


def test_run_round_uniform_weights():
    state = make_state(n_clients=4, dims=(4, 6, 3))
    outcome = run_round(state, uniform_strategy(), client_data(4), RoundConfig(total_rounds=3), 0)
    assert np.array_equal(outcome["weights"], [0.25] * 4)
    assert outcome["round"] == 1 and state.round_index == 1


def test_run_round_celm_identical_clients_stay_uniform():
    # Equal models, equal probe images and zero learning rate: probes agree,
    # so the instantaneous scores are uniform by symmetry.
    n = 3
    state = make_state(n_clients=n, dims=(4, 6, 3))
    one_slot = np.random.default_rng(5).standard_normal((3, 4))
    state.probe_bank = ProbeBank(np.tile(one_slot, (n + 1, 1, 1)))
    strategy = celm_strategy(n, probe_config=ProbeConfig(steps=20, lm_learning_rate=0.05),
                             warmup_horizon=2)
    cfg = RoundConfig(total_rounds=4, client_lr=0.0, warmup_horizon=2)
    data = client_data(n)
    outcome = run_round(state, strategy, [data[0]] * n, cfg, 0)
    assert np.allclose(outcome["weights"], 1.0 / n, atol=1e-12)
    assert np.allclose(outcome["record"]["c_bar"], 1.0 / n, atol=1e-12)


def test_run_round_weights_valid_for_every_strategy():
    for build in (uniform_strategy, lambda: celm_strategy(3, ProbeConfig(steps=10), warmup_horizon=1),
                  lambda: Strategy("cgsv")):
        state = make_state(n_clients=3)
        state.probe_bank = ProbeBank.gaussian(4, 3, 4, np.random.default_rng(0))
        for _ in range(3):
            outcome = run_round(state, build(), client_data(3), RoundConfig(total_rounds=3), 0)
            w = outcome["weights"]
            assert (w >= 0).all()
            assert abs(w.sum() - 1.0) < 1e-9


def test_celm_freezes_after_horizon():
    n = 3
    state = make_state(n_clients=n)
    state.probe_bank = ProbeBank.gaussian(n + 1, 3, 4, np.random.default_rng(1))
    strategy = celm_strategy(n, ProbeConfig(steps=10, lm_learning_rate=0.05), warmup_horizon=2)
    cfg = RoundConfig(total_rounds=6, warmup_horizon=2)
    data = client_data(n)
    frozen_weights = None
    for t in range(1, 6):
        outcome = run_round(state, strategy, data, cfg, 0)
        if t == 2:
            frozen_weights = outcome["weights"].copy()
            assert strategy.contribution.frozen
        if t > 2:
            assert np.array_equal(outcome["weights"], frozen_weights)
            assert outcome["record"]["Q"] is None


def test_celm_warmup_zero_matches_uniform_weights():
    n = 3
    state = make_state(n_clients=n)
    state.probe_bank = ProbeBank.gaussian(n + 1, 3, 4, np.random.default_rng(1))
    strategy = celm_strategy(n, ProbeConfig(steps=10), warmup_horizon=0)
    cfg = RoundConfig(total_rounds=3, warmup_horizon=0)
    data = client_data(n)
    for _ in range(3):
        outcome = run_round(state, strategy, data, cfg, 0)
        assert np.array_equal(outcome["weights"], np.full(n, 1.0 / n))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def tiny_config(strategy="celm", regime="iid", **round_kw):
    rounds = dict(total_rounds=4, warmup_horizon=2, client_lr=0.2)
    rounds.update(round_kw)
    spec = PartitionSpec(regime, 3, alpha=0.5 if regime == "dirichlet" else None)
    return ExperimentConfig(
        data=DataConfig(classes=4, dim=8, per_class=60, test_per_class=40),
        partition=spec,
        rounds=RoundConfig(**rounds),
        probe=ProbeConfig(steps=25, lm_learning_rate=0.05),
        strategy=strategy,
    )


def test_run_experiment_trace_shape_and_rows():
    result = run_experiment(tiny_config(), seed=0)
    assert len(result.rows) == 4
    row = result.rows[0]
    assert row["round"] == 1 and row["strategy"] == "celm"
    assert {"accuracy", "balanced_accuracy", "acc_class_1", "acc_class_4", "c_1", "c_3"} <= set(row)
    assert len(result.contributions) == 4


def test_run_experiment_deterministic():
    a = run_experiment(tiny_config(), seed=7)
    b = run_experiment(tiny_config(), seed=7)
    assert a.rows == b.rows
    assert a.contributions == b.contributions


def test_run_experiment_seed_changes_trace():
    a = run_experiment(tiny_config(), seed=7)
    b = run_experiment(tiny_config(), seed=8)
    assert a.rows != b.rows


def test_run_experiment_workers_do_not_change_results():
    a = run_experiment(tiny_config(), seed=3, workers=1)
    b = run_experiment(tiny_config(), seed=3, workers=4)
    assert a.rows == b.rows


def test_evaluate_reports_all_classes():
    ds = synth_dataset(4, 30, 8, seed=0)
    model = init_mlp([8, 4], np.random.default_rng(0))
    metrics = evaluate(model, ds, rare_classes=(4,))
    assert len(metrics["per_class"]) == 4
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_trace_csv_round_trip(tmp_path):
    result = run_experiment(tiny_config(), seed=0)
    path = tmp_path / "trace.csv"
    write_trace_csv(result.rows, path)
    header = path.read_text().splitlines()[0]
    assert header.startswith("round,strategy,accuracy,balanced_accuracy,acc_class_1")
    back = read_trace_csv(path)
    assert back == result.rows
