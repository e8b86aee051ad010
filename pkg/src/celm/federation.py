"""Communication rounds: broadcast, local training, weighting, aggregation.

One round runs broadcast -> local SGD on every client -> strategy-specific
weight computation -> weighted parameter averaging. The contribution-aware
strategy additionally probes the previous global model and every client
model during the warm-up horizon, broadcasts only the backbone in those
rounds (clients keep their local classifier heads), and freezes its weight
vector at the end of warm-up.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analysis import accuracy_decomposition
from .data import Dataset
from .estimator import (ContributionState, class_shares, client_scores,
                        contribution_record, debias, ema_update, maybe_freeze,
                        simplex_normalize)
from .nn import MlpModel, forward, loss_and_param_grad, sgd_step
from .probe import ProbeBank, ProbeConfig, global_baseline, lm_probe
from .rng import substream

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "celm", "cgsv")


@dataclass
class RoundConfig:
    total_rounds: int
    local_epochs: int = 1
    batch_size: int = 128
    client_lr: float = 0.1
    lr_decay_round: int | None = None
    lr_decay_factor: float = 0.1
    warmup_horizon: int | None = None  # None -> ceil(5% of total_rounds)

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ValueError("total_rounds must be >= 1")
        if self.warmup_horizon is not None and not 0 <= self.warmup_horizon <= self.total_rounds:
            raise ValueError("warmup_horizon must lie in 0..total_rounds")

    def resolved_warmup(self) -> int:
        if self.warmup_horizon is not None:
            return self.warmup_horizon
        return int(np.ceil(0.05 * self.total_rounds))


def lr_at_round(cfg: RoundConfig, round_index: int) -> float:
    """Step schedule: the learning rate drops by lr_decay_factor after lr_decay_round."""
    if cfg.lr_decay_round is not None and round_index > cfg.lr_decay_round:
        return cfg.client_lr * cfg.lr_decay_factor
    return cfg.client_lr


@dataclass
class Strategy:
    """Aggregation rule plus whatever per-run state it carries."""

    kind: str
    contribution: ContributionState | None = None
    probe_config: ProbeConfig | None = None
    last_cosines: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")


def uniform_strategy() -> Strategy:
    return Strategy("uniform")


def celm_strategy(n_clients: int, probe_config: ProbeConfig | None = None,
                  ema_factor: float = 0.5, epsilon: float = 1e-8,
                  warmup_horizon: int = 1) -> Strategy:
    state = ContributionState.uniform(
        n_clients, ema_factor=ema_factor, epsilon=epsilon, warmup_horizon=warmup_horizon
    )
    return Strategy("celm", contribution=state, probe_config=probe_config or ProbeConfig())


def cgsv_strategy() -> Strategy:
    return Strategy("cgsv")


@dataclass
class FederationState:
    global_model: MlpModel
    client_models: list[MlpModel]
    probe_bank: ProbeBank | None = None
    round_index: int = 0


def broadcast(state: FederationState, warmup: bool = False) -> None:
    """Copy global parameters into every client; during warm-up only the
    backbone is copied and client heads stay local."""
    layers = state.global_model.layers
    upto = len(layers) - 1 if warmup else len(layers)
    for client in state.client_models:
        for i in range(upto):
            client.layers[i].weights[...] = layers[i].weights
            client.layers[i].bias[...] = layers[i].bias


def local_train(model: MlpModel, dataset: Dataset, cfg: RoundConfig,
                round_index: int, rng: np.random.Generator) -> MlpModel:
    """One (or more) epochs of mini-batch SGD over a seeded shuffle."""
    if len(dataset) == 0:
        log.warning("empty client dataset at round %d; skipping local training", round_index)
        return model
    lr = lr_at_round(cfg, round_index)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, grads = loss_and_param_grad(model, dataset.inputs[batch], dataset.labels[batch])
            sgd_step(model.parameters(), grads, lr)
    return model


def aggregate(client_models: list[MlpModel], weights: np.ndarray) -> MlpModel:
    """Parameter-wise convex combination of the client models."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(client_models):
        raise ValueError("one weight per client required")
    if (weights < 0).any() or abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be on the simplex (sum={weights.sum()!r})")
    layers = []
    for li in range(len(client_models[0].layers)):
        w = np.zeros_like(client_models[0].layers[li].weights)
        b = np.zeros_like(client_models[0].layers[li].bias)
        for c, model in zip(weights, client_models):
            w += c * model.layers[li].weights
            b += c * model.layers[li].bias
        layers.append(type(client_models[0].layers[li])(w, b))
    return MlpModel(layers)


def cosine_alignment(deltas: np.ndarray, mean_delta: np.ndarray | None = None) -> np.ndarray:
    """Cosine of each client's update against the cohort mean update.

    Zero-norm vectors (either side) get cosine 0.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if mean_delta is None:
        mean_delta = deltas.mean(axis=0)
    mean_norm = np.linalg.norm(mean_delta)
    cos = np.zeros(deltas.shape[0])
    if mean_norm == 0:
        return cos
    for i, d in enumerate(deltas):
        norm = np.linalg.norm(d)
        if norm > 0:
            cos[i] = float(d @ mean_delta / (norm * mean_norm))
    return cos


def cgsv_weights(deltas: np.ndarray, mean_delta: np.ndarray | None = None) -> np.ndarray:
    """Similarity-to-average weighting: clamp negative cosines to zero, then
    normalize onto the simplex (uniform fallback when nothing aligns)."""
    cos = cosine_alignment(deltas, mean_delta)
    clamped = np.maximum(cos, 0.0)
    total = clamped.sum()
    if total <= 0:
        log.warning("no client update positively aligned with the mean; uniform fallback")
        return np.full(len(clamped), 1.0 / len(clamped))
    return clamped / total


def _map_ordered(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def run_round(state: FederationState, strategy: Strategy, client_datasets: list[Dataset],
              cfg: RoundConfig, root_seed: int, workers: int = 1) -> dict:
    """Advance the federation by one communication round.

    Returns {"round", "weights", "record"} where record is the per-round
    contribution trace row.
    """
    t = state.round_index + 1
    n = len(state.client_models)
    warmup_round = strategy.kind == "celm" and t <= cfg.resolved_warmup()
    broadcast(state, warmup=warmup_round)
    pre_train_flat = state.global_model.flat_parameters() if strategy.kind == "cgsv" else None

    def train(i: int) -> None:
        local_train(state.client_models[i], client_datasets[i], cfg, t,
                    substream(root_seed, "shuffle", t, i))

    _map_ordered(train, range(n), workers)

    record = None
    if warmup_round:
        pcfg = strategy.probe_config
        bank = state.probe_bank
        global_result = lm_probe(state.global_model, bank.images[0], pcfg)
        bank.images[0] = global_result.final_images
        baseline = global_baseline(global_result)

        results = _map_ordered(
            lambda i: lm_probe(state.client_models[i], bank.images[i + 1], pcfg), range(n), workers
        )
        for i, res in enumerate(results):
            bank.images[i + 1] = res.final_images
        evidence = debias(np.stack([res.scores for res in results]), baseline)

        contrib = strategy.contribution
        shares = class_shares(evidence, contrib.epsilon)
        scores = client_scores(shares)
        instantaneous = simplex_normalize(scores)
        ema_update(contrib, instantaneous)
        maybe_freeze(contrib, t)
        record = contribution_record(t, contrib.weights, contrib.frozen, evidence,
                                     baseline, shares, scores, instantaneous)

    if strategy.kind == "uniform":
        weights = np.full(n, 1.0 / n)
    elif strategy.kind == "celm":
        weights = strategy.contribution.weights.copy()
    else:  # cgsv
        deltas = np.stack([m.flat_parameters() for m in state.client_models]) - pre_train_flat
        weights = cgsv_weights(deltas)
        strategy.last_cosines = cosine_alignment(deltas)

    if record is None:
        frozen = bool(strategy.contribution.frozen) if strategy.contribution else False
        record = contribution_record(t, weights, frozen)

    state.global_model = aggregate(state.client_models, weights)
    state.round_index = t
    return {"round": t, "weights": weights, "record": record}


def evaluate(model: MlpModel, dataset: Dataset, rare_classes=()) -> dict:
    """Accuracy, balanced accuracy, rare-class accuracy and per-class recalls."""
    logits = forward(model, dataset.inputs)
    predictions = np.argmax(logits, axis=1) + 1
    balanced, rare_acc, per_class = accuracy_decomposition(
        predictions, dataset.labels, rare_classes, num_classes=dataset.num_classes
    )
    return {
        "accuracy": float(np.mean(predictions == dataset.labels)),
        "balanced_accuracy": balanced,
        "rare_class_accuracy": rare_acc,
        "per_class": per_class,
        "predictions": predictions,
    }
