"""Post-hoc analytics over contribution traces.

Free-rider detection standardizes a round's contribution vector into
z-scores and flags clients below a threshold; sweeping thresholds gives a
threshold-agnostic FPR, and rank-based AUROC scores the raw separability.
Distribution fidelity compares estimated class distributions to the true
allocation with Jensen-Shannon divergence (natural log), 1-D earth mover
distance on normalized class indices, and Hellinger distance.
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(-3.0, 0.25, 0.25), 2))


def zscores(contributions: np.ndarray) -> np.ndarray:
    """Population z-scores; an all-equal vector maps to all zeros."""
    c = np.asarray(contributions, dtype=np.float64)
    std = c.std()
    if std == 0:
        return np.zeros_like(c)
    return (c - c.mean()) / std


def zscore_flags(contributions: np.ndarray, threshold: float) -> np.ndarray:
    """Flag clients whose contribution z-score falls below the threshold."""
    c = np.asarray(contributions, dtype=np.float64)
    if c.size < 2:
        raise ValueError("need at least two clients to standardize")
    return zscores(c) < threshold


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive (free-rider) scores below a negative, ties at half.

    `scores` are contribution-like (low = suspicious); `labels` marks the
    true free-riders. Equivalent to rank-based AUROC with midrank ties, and
    invariant under any strictly increasing transform of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative label")
    diff = pos[:, None] - neg[None, :]
    return float(((diff < 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


@dataclass
class DetectionSweep:
    """Per-round flags across a strictly increasing threshold grid."""

    thresholds: tuple[float, ...]
    labels: np.ndarray                       # true free-rider mask [N]
    flags: list[np.ndarray] = field(default_factory=list)  # per round: [T_thr, N] bool
    contributions: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        self.labels = np.asarray(self.labels, dtype=bool)

    @classmethod
    def from_rounds(cls, contribution_rounds, labels,
                    thresholds=DEFAULT_THRESHOLDS) -> "DetectionSweep":
        sweep = cls(thresholds=tuple(thresholds), labels=labels)
        for c in contribution_rounds:
            sweep.add_round(c)
        return sweep

    def add_round(self, contributions: np.ndarray) -> None:
        c = np.asarray(contributions, dtype=np.float64)
        self.contributions.append(c)
        self.flags.append(np.stack([zscore_flags(c, t) for t in self.thresholds]))

    def mean_auroc(self) -> float:
        return float(np.mean([auroc(c, self.labels) for c in self.contributions]))

    def mean_fpr(self) -> float:
        honest = ~self.labels
        per_round = [f[:, honest].mean() for f in self.flags]
        return float(np.mean(per_round))

    def mean_tpr(self) -> float:
        riders = self.labels
        per_round = [f[:, riders].mean() for f in self.flags]
        return float(np.mean(per_round))


def fpr_sweep(contribution_rounds, labels, thresholds=DEFAULT_THRESHOLDS) -> float:
    """Mean false-positive rate over thresholds and rounds."""
    return DetectionSweep.from_rounds(contribution_rounds, labels, thresholds).mean_fpr()


# ---------------------------------------------------------------------------
# Distribution distances
# ---------------------------------------------------------------------------

def _check_pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    return p, q


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / m[mask])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; bounded by ln 2."""
    p, q = _check_pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def emd_1d(p, q) -> float:
    """Earth mover distance on the class line with ground distance 1/K per step."""
    p, q = _check_pair(p, q)
    return float(np.abs(np.cumsum(p - q)).sum() / p.size)


def hellinger(p, q) -> float:
    """sqrt(1 - Bhattacharyya coefficient), computed as ||sqrt(p)-sqrt(q)||/sqrt(2)
    so that identical inputs give exactly zero; bounded by 1."""
    p, q = _check_pair(p, q)
    return float(np.linalg.norm(np.sqrt(p) - np.sqrt(q)) / np.sqrt(2.0))


@dataclass
class FidelityReport:
    """Distances of the uniform reference and an estimate from the truth."""

    jsd_uniform: float
    jsd_estimated: float
    emd_uniform: float
    emd_estimated: float
    hellinger_uniform: float
    hellinger_estimated: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def estimated_dominates(self) -> bool:
        return (self.jsd_estimated < self.jsd_uniform
                and self.emd_estimated < self.emd_uniform
                and self.hellinger_estimated < self.hellinger_uniform)


def fidelity_report(true_dist: np.ndarray, estimated_dist: np.ndarray) -> FidelityReport:
    true_dist = np.asarray(true_dist, dtype=np.float64)
    uniform = np.full_like(true_dist, 1.0 / true_dist.size)
    return FidelityReport(
        jsd_uniform=jsd(uniform, true_dist),
        jsd_estimated=jsd(estimated_dist, true_dist),
        emd_uniform=emd_1d(uniform, true_dist),
        emd_estimated=emd_1d(estimated_dist, true_dist),
        hellinger_uniform=hellinger(uniform, true_dist),
        hellinger_estimated=hellinger(estimated_dist, true_dist),
    )


# ---------------------------------------------------------------------------
# Accuracy decompositions
# ---------------------------------------------------------------------------

def accuracy_decomposition(predictions: np.ndarray, labels: np.ndarray,
                           rare_classes=(), num_classes: int | None = None):
    """(balanced accuracy, rare-class accuracy, per-class recalls).

    Balanced accuracy averages recalls over classes present in `labels`;
    rare-class accuracy averages recalls over `rare_classes` (nan if empty).
    Per-class recalls are indexed c-1 for class c, nan where unsupported.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes or int(max(predictions.max(initial=1), labels.max(initial=1)))
    per_class = np.full(k, np.nan)
    for c in range(1, k + 1):
        mask = labels == c
        if mask.any():
            per_class[c - 1] = float(np.mean(predictions[mask] == c))
    balanced = float(np.nanmean(per_class))
    rare = [per_class[c - 1] for c in rare_classes]
    rare_acc = float(np.nanmean(rare)) if rare else float("nan")
    return balanced, rare_acc, per_class
