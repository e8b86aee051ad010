"""End-to-end experiment execution: config + seed -> metrics trace.

The trace is a pure function of (config, seed): every random draw flows
through a named substream of the root seed, client loops run in ascending
client order, and all arithmetic is float64.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, LabelAllocation, load_idx, partition, stress_roles, synth_dataset
from .estimator import ContributionState
from .federation import (FederationState, RoundConfig, Strategy, celm_strategy,
                         cgsv_strategy, evaluate, run_round, uniform_strategy)
from .nn import init_mlp
from .probe import ProbeBank
from .rng import derive_seed, substream


@dataclass
class ExperimentResult:
    seed: int
    strategy: str
    rows: list[dict]                 # one metrics row per round
    contributions: list[dict]        # one estimator trace record per round
    allocation: LabelAllocation
    rare_classes: tuple[int, ...]
    freerider_clients: tuple[int, ...]
    final_model: object
    probe_bank: ProbeBank | None

    @property
    def final(self) -> dict:
        return self.rows[-1]


def build_datasets(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "idx":
        return (load_idx(d.images, d.labels), load_idx(d.test_images, d.test_labels))
    train = synth_dataset(d.classes, d.per_class, d.dim, derive_seed(seed, "data"),
                          d.separation, d.imbalance)
    test = synth_dataset(d.classes, d.test_per_class, d.dim, derive_seed(seed, "data-test"),
                         d.separation)
    return train, test


def build_strategy(cfg: ExperimentConfig, n_clients: int, warmup_horizon: int) -> Strategy:
    if cfg.strategy == "uniform":
        return uniform_strategy()
    if cfg.strategy == "cgsv":
        return cgsv_strategy()
    return celm_strategy(n_clients, probe_config=cfg.probe, ema_factor=cfg.ema_factor,
                         epsilon=cfg.epsilon, warmup_horizon=warmup_horizon)


def run_experiment(cfg: ExperimentConfig, seed: int, workers: int | None = None) -> ExperimentResult:
    """Run all rounds for one seed and return the full trace."""
    workers = workers or cfg.workers
    train, test = build_datasets(cfg, seed)
    spec = replace(cfg.partition, seed=derive_seed(seed, "partition"))
    client_datasets, allocation = partition(train, spec)
    rare_classes, _, freerider = stress_roles(spec, train.num_classes)

    n = spec.clients
    dims = [train.dim, *cfg.hidden, train.num_classes]
    global_model = init_mlp(dims, substream(seed, "init"))
    state = FederationState(
        global_model=global_model,
        client_models=[global_model.copy() for _ in range(n)],
    )
    warmup = cfg.rounds.resolved_warmup()
    strategy = build_strategy(cfg, n, warmup)
    if strategy.kind == "celm":
        state.probe_bank = ProbeBank.gaussian(n + 1, train.num_classes, train.dim,
                                              substream(seed, "probe-init"))

    rows: list[dict] = []
    contributions: list[dict] = []
    for _ in range(cfg.rounds.total_rounds):
        outcome = run_round(state, strategy, client_datasets, cfg.rounds, seed, workers)
        metrics = evaluate(state.global_model, test, rare_classes)
        row = {
            "round": outcome["round"],
            "strategy": cfg.strategy,
            "accuracy": metrics["accuracy"],
            "balanced_accuracy": metrics["balanced_accuracy"],
        }
        for c, recall in enumerate(metrics["per_class"], start=1):
            row[f"acc_class_{c}"] = float(recall)
        for i, w in enumerate(outcome["weights"], start=1):
            row[f"c_{i}"] = float(w)
        rows.append(row)
        contributions.append(outcome["record"])

    return ExperimentResult(
        seed=seed,
        strategy=cfg.strategy,
        rows=rows,
        contributions=contributions,
        allocation=allocation,
        rare_classes=rare_classes,
        freerider_clients=(freerider,) if freerider else (),
        final_model=state.global_model,
        probe_bank=state.probe_bank,
    )


def trace_columns(n_classes: int, n_clients: int) -> list[str]:
    return (["round", "strategy", "accuracy", "balanced_accuracy"]
            + [f"acc_class_{c}" for c in range(1, n_classes + 1)]
            + [f"c_{i}" for i in range(1, n_clients + 1)])


def write_trace_csv(rows: list[dict], path) -> None:
    """RFC-4180 CSV with a mandatory header; floats via shortest round-trip repr."""
    if not rows:
        raise ValueError("refusing to write an empty trace")
    columns = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row[col]) for col in columns])


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for raw in reader:
            row = {}
            for key, value in raw.items():
                if key in ("round",):
                    row[key] = int(value)
                elif key == "strategy":
                    row[key] = value
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows
