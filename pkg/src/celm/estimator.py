"""From probe scores to aggregation weights.

The per-round pipeline is pure array algebra: debias raw client scores
against the global baseline (ReLU at zero), normalize evidence across
clients within each class, average class shares into one score per client,
project onto the simplex, then EMA-smooth. After the warm-up horizon the
smoothed vector freezes and is reused verbatim.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
DEFAULT_EMA_FACTOR = 0.5


class FrozenStateError(RuntimeError):
    """Attempted to update contribution weights after the freeze."""


class DistributionUndefinedError(ValueError):
    """No positive evidence anywhere; class distributions are undefined."""


def debias(raw_scores: np.ndarray, baseline: float) -> np.ndarray:
    """Evidence matrix Q: baseline subtraction then ReLU suppression."""
    if not np.isfinite(baseline):
        raise ValueError("baseline must be finite")
    return np.maximum(0.0, np.asarray(raw_scores, dtype=np.float64) - baseline)


def class_shares(evidence: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Within-class normalization r[i,c] = Q[i,c] / (sum_j Q[j,c] + epsilon).

    The epsilon keeps all-zero classes at zero instead of dividing by zero,
    and is why a sole evidence holder gets a share just below 1.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    evidence = np.asarray(evidence, dtype=np.float64)
    return evidence / (evidence.sum(axis=0, keepdims=True) + epsilon)


def client_scores(shares: np.ndarray) -> np.ndarray:
    """Average relative share over classes: one score per client."""
    return np.asarray(shares, dtype=np.float64).mean(axis=1)


def simplex_normalize(scores: np.ndarray) -> np.ndarray:
    """Scale scores to sum to 1; an all-zero round falls back to uniform."""
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    if total <= 0:
        log.warning("all-zero contribution scores; falling back to uniform weights")
        return np.full(scores.shape, 1.0 / scores.size)
    return scores / total


@dataclass
class ContributionState:
    """EMA-smoothed simplex weights plus the freeze flag."""

    weights: np.ndarray
    ema_factor: float = DEFAULT_EMA_FACTOR
    warmup_horizon: int = 1
    epsilon: float = DEFAULT_EPSILON
    frozen: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not 0.0 <= self.ema_factor < 1.0:
            raise ValueError("ema_factor must lie in [0, 1)")
        if self.warmup_horizon < 0:
            raise ValueError("warmup_horizon must be >= 0")
        _require_simplex(self.weights)

    @classmethod
    def uniform(cls, n_clients: int, **kwargs) -> "ContributionState":
        return cls(np.full(n_clients, 1.0 / n_clients), **kwargs)


def _require_simplex(weights: np.ndarray, tol: float = 1e-9) -> None:
    if (weights < 0).any() or abs(float(weights.sum()) - 1.0) > tol:
        raise ValueError(f"weights must be on the simplex (sum={weights.sum()!r})")


def ema_update(state: ContributionState, instantaneous: np.ndarray) -> np.ndarray:
    """weights <- beta * weights + (1 - beta) * instantaneous; returns the new vector."""
    if state.frozen:
        raise FrozenStateError("contribution weights are frozen; ema_update rejected")
    instantaneous = np.asarray(instantaneous, dtype=np.float64)
    _require_simplex(instantaneous)
    state.weights = state.ema_factor * state.weights + (1.0 - state.ema_factor) * instantaneous
    return state.weights


def maybe_freeze(state: ContributionState, round_index: int) -> ContributionState:
    """Freeze at the end of round T_w; later rounds reuse the vector verbatim."""
    if not state.frozen and round_index >= state.warmup_horizon:
        state.frozen = True
    return state


def estimate_distributions(evidence: np.ndarray):
    """Evidence read as label-distribution proxy.

    Returns (client_distributions [N, K], global_distribution [K]): rows of Q
    normalized per client (uniform where a row is all zero), and column mass
    normalized over the whole matrix.
    """
    evidence = np.asarray(evidence, dtype=np.float64)
    total = evidence.sum()
    if total <= 0:
        raise DistributionUndefinedError("evidence matrix has no positive entries")
    row_sums = evidence.sum(axis=1, keepdims=True)
    clients = np.full_like(evidence, 1.0 / evidence.shape[1])
    np.divide(evidence, row_sums, out=clients, where=row_sums > 0)
    return clients, evidence.sum(axis=0) / total


def contribution_record(round_index: int, weights: np.ndarray, frozen: bool,
                        evidence: np.ndarray | None = None, baseline: float | None = None,
                        shares: np.ndarray | None = None, scores: np.ndarray | None = None,
                        instantaneous: np.ndarray | None = None) -> dict:
    """One JSON-ready trace row; every estimator quantity is re-derivable from it."""
    as_list = lambda a: None if a is None else np.asarray(a, dtype=np.float64).tolist()
    return {
        "round": int(round_index),
        "Q": as_list(evidence),
        "b": None if baseline is None else float(baseline),
        "r": as_list(shares),
        "c_hat": as_list(scores),
        "c_bar": as_list(instantaneous),
        "c": as_list(weights),
        "frozen": bool(frozen),
    }


def write_contribution_trace(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, sort_keys=True, indent=1)
        f.write("\n")


def read_contribution_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
