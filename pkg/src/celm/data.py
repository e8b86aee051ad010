"""Datasets and client partitions.

Provides a synthetic Gaussian-cluster dataset (the desk-scale stand-in for
image benchmarks), an IDX file loader/writer, and the split regimes used to
stress-test aggregation: IID, Dirichlet(alpha), pure label skew (PLS), step
label skew (SLS), and the Maverick / free-rider constructions.

A partition is realized in two stages: first a client-by-class counts
matrix (LabelAllocation) is drawn, then samples are dealt out of per-class
pools so that client datasets are disjoint and tally the matrix exactly.
"""

import csv
import gzip
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class AllocationError(ValueError):
    """The requested split cannot be realized from the dataset's supply."""


class IdxFormatError(ValueError):
    """An IDX file is malformed or truncated."""


@dataclass
class Dataset:
    inputs: np.ndarray        # [n, d] float64
    labels: np.ndarray        # [n] int64, values in 1..num_classes
    num_classes: int
    image_shape: tuple[int, int] | None = None  # (rows, cols) when loaded from IDX

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in 1..{self.num_classes}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        """Samples per class, index c-1 for class c."""
        return np.bincount(self.labels, minlength=self.num_classes + 1)[1:]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes, self.image_shape)


def class_means(num_classes: int, dim: int, separation: float = 2.0) -> np.ndarray:
    """Deterministic cluster means: antipodal pairs along coordinate axes.

    Class 2j-1 sits at +separation*e_j and class 2j at -separation*e_j, so
    K classes need ceil(K/2) dimensions. Shared by train and test draws.
    """
    if dim < (num_classes + 1) // 2:
        raise ValueError(f"dim {dim} too small for {num_classes} antipodal class means")
    means = np.zeros((num_classes, dim))
    for c in range(num_classes):
        axis = c // 2
        sign = 1.0 if c % 2 == 0 else -1.0
        means[c, axis] = sign * separation
    return means


def synth_dataset(num_classes: int, n_per_class: int, dim: int, seed: int,
                  separation: float = 2.0, imbalance: float = 1.0) -> Dataset:
    """Unit-covariance Gaussian clusters around class_means; ~90% linearly separable
    at the default separation.

    imbalance > 1 ramps the class supply linearly from n_per_class (class 1)
    down to n_per_class/imbalance (class K), giving the cohort a genuinely
    non-uniform global label distribution.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    if imbalance < 1.0:
        raise ValueError("imbalance must be >= 1 (ratio of largest to smallest class)")
    means = class_means(num_classes, dim, separation)
    counts = np.rint(np.linspace(n_per_class, n_per_class / imbalance, num_classes)).astype(int)
    if counts.min() < 1:
        raise ValueError("imbalance leaves a class without samples")
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((int(counts.sum()), dim)) + np.repeat(means, counts, axis=0)
    labels = np.repeat(np.arange(1, num_classes + 1), counts)
    perm = rng.permutation(len(labels))
    return Dataset(inputs[perm], labels[perm], num_classes)


# ---------------------------------------------------------------------------
# IDX ingestion (MNIST-style big-endian files, optionally gzipped)
# ---------------------------------------------------------------------------

def _idx_open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _read_exact(f, n: int, path, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated at byte offset {offset + len(buf)} (wanted {n} bytes)")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0,1], labels surfaced as 1..K."""
    with _idx_open(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, 0))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x} at byte offset 0")
        raw = _read_exact(f, count * rows * cols, images_path, 16)
    with _idx_open(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path, 0))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x} at byte offset 0")
        label_raw = _read_exact(f, label_count, labels_path, 8)
    if label_count != count:
        raise IdxFormatError(f"{labels_path}: {label_count} labels for {count} images")
    if count == 0:
        raise IdxFormatError(f"{images_path}: empty file (zero images)")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(label_raw, dtype=np.uint8).astype(np.int64) + 1
    return Dataset(pixels, labels, int(labels.max()), image_shape=(rows, cols))


def write_idx(images: np.ndarray, labels0: np.ndarray, images_path, labels_path) -> None:
    """Inverse of load_idx for fixtures: images [n, rows, cols] uint8, labels 0-based uint8."""
    images = np.asarray(images, dtype=np.uint8)
    labels0 = np.asarray(labels0, dtype=np.uint8)
    n, rows, cols = images.shape
    with _idx_open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with _idx_open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels0)))
        f.write(labels0.tobytes())


# ---------------------------------------------------------------------------
# Allocation matrices and split regimes
# ---------------------------------------------------------------------------

@dataclass
class LabelAllocation:
    """Client-by-class sample counts; row i = client i+1, column c = class c+1."""

    counts: np.ndarray  # [N, K] nonnegative int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or (self.counts < 0).any():
            raise AllocationError("allocation counts must be a nonnegative N x K matrix")

    @property
    def n_clients(self) -> int:
        return self.counts.shape[0]

    @property
    def n_classes(self) -> int:
        return self.counts.shape[1]

    def client_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def class_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def global_distribution(self) -> np.ndarray:
        totals = self.class_totals().astype(np.float64)
        return totals / totals.sum()

    def client_distributions(self) -> np.ndarray:
        rows = self.counts.astype(np.float64)
        sums = rows.sum(axis=1, keepdims=True)
        out = np.full_like(rows, 1.0 / self.n_classes)
        np.divide(rows, sums, out=out, where=sums > 0)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["client"] + [f"class_{c}" for c in range(1, self.n_classes + 1)])
            for i, row in enumerate(self.counts, start=1):
                writer.writerow([i] + [int(v) for v in row])

    @classmethod
    def from_csv(cls, path) -> "LabelAllocation":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        return cls(np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64))

    def bubble_data(self) -> dict:
        """Fig-style bubble-plot export: per-cell counts plus both marginals."""
        return {
            "clients": self.n_clients,
            "classes": self.n_classes,
            "counts": self.counts.tolist(),
            "per_class_totals": self.class_totals().tolist(),
            "per_client_totals": self.client_totals().tolist(),
        }


@dataclass
class PartitionSpec:
    """Declarative description of a split regime.

    regime: one of iid | dirichlet | pls | sls | maverick | freerider |
    freerider_maverick. Class ids in rare_classes / freerider_classes are
    1-based; client ids are 1-based too.
    """

    regime: str
    clients: int
    seed: int = 0
    alpha: float | None = None
    classes_per_client: int | Sequence[int] | None = None
    sls_min_classes: int = 2
    sls_sample_step: float = 1.0
    rare_classes: tuple[int, ...] | None = None
    maverick_client: int | None = None
    freerider_classes: tuple[int, ...] | None = None
    freerider_client: int | None = None
    freerider_budget: float = 0.01

    def __post_init__(self):
        if self.clients < 1:
            raise AllocationError("need at least one client")
        if self.regime == "dirichlet" and (self.alpha is None or self.alpha <= 0):
            raise AllocationError("dirichlet regime requires alpha > 0")


REGIMES = ("iid", "dirichlet", "pls", "sls", "maverick", "freerider", "freerider_maverick")
SKEWED_REGIMES = ("dirichlet", "pls", "sls", "maverick", "freerider", "freerider_maverick")


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of `total` following `proportions` exactly in sum."""
    proportions = np.asarray(proportions, dtype=np.float64)
    if total == 0:
        return np.zeros(len(proportions), dtype=np.int64)
    s = proportions.sum()
    ideal = proportions / s * total if s > 0 else np.full(len(proportions), total / len(proportions))
    base = np.floor(ideal).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(ideal - base), kind="stable")
        base[order[:short]] += 1
    return base


def _counts_iid(supply: np.ndarray, n_clients: int) -> np.ndarray:
    counts = np.zeros((n_clients, len(supply)), dtype=np.int64)
    for c, total in enumerate(supply):
        share = _largest_remainder(np.ones(n_clients), int(total))
        counts[:, c] = np.roll(share, c)  # rotate the +1 leftovers across classes
    return counts


def _counts_dirichlet(supply: np.ndarray, n_clients: int, alpha: float,
                      rng: np.random.Generator) -> np.ndarray:
    counts = np.zeros((n_clients, len(supply)), dtype=np.int64)
    for c, total in enumerate(supply):
        p = rng.dirichlet(np.full(n_clients, alpha))
        counts[:, c] = _largest_remainder(p, int(total))
    return counts


def _support_sizes(spec: PartitionSpec, n_classes: int) -> np.ndarray:
    """Per-client class-support sizes for PLS/SLS."""
    cpc = spec.classes_per_client
    if cpc is None:
        low = min(spec.sls_min_classes, n_classes)
        sizes = np.rint(np.linspace(low, n_classes, spec.clients)).astype(np.int64)
    elif np.isscalar(cpc):
        sizes = np.full(spec.clients, int(cpc), dtype=np.int64)
    else:
        sizes = np.asarray(list(cpc), dtype=np.int64)
        if len(sizes) != spec.clients:
            raise AllocationError("classes_per_client list must have one entry per client")
    if (sizes < 1).any() or (sizes > n_classes).any():
        raise AllocationError(f"class support sizes must lie in 1..{n_classes}")
    return sizes


def _class_sets(sizes: np.ndarray, n_classes: int, n_clients: int) -> list[np.ndarray]:
    """Staggered contiguous (mod K) class blocks; every class must be covered."""
    sets = []
    covered = np.zeros(n_classes, dtype=bool)
    for i, s in enumerate(sizes):
        start = (i * n_classes) // n_clients
        classes = (start + np.arange(s)) % n_classes
        covered[classes] = True
        sets.append(np.sort(classes))
    if not covered.all():
        missing = np.flatnonzero(~covered) + 1
        raise AllocationError(f"classes {missing.tolist()} held by no client; increase support sizes")
    return sets


def _counts_skew(supply: np.ndarray, sizes: np.ndarray, budgets: np.ndarray,
                 n_classes: int, n_clients: int) -> np.ndarray:
    """Shared PLS/SLS machinery: per-client budgets spread evenly over class sets,
    globally scaled down so no class overdraws its supply."""
    sets = _class_sets(sizes, n_classes, n_clients)
    demand = np.zeros(n_classes)
    for i, classes in enumerate(sets):
        demand[classes] += budgets[i] / sizes[i]
    holders = np.array([sum(1 for s in sets if c in s) for c in range(n_classes)])
    with np.errstate(divide="ignore", invalid="ignore"):
        headroom = np.where(demand > 0, (supply - holders) / demand, np.inf)
    scale = min(1.0, float(headroom.min()))
    if scale <= 0:
        raise AllocationError("supply too small for the requested skew pattern")
    counts = np.zeros((n_clients, n_classes), dtype=np.int64)
    for i, classes in enumerate(sets):
        row_total = int(np.floor(scale * budgets[i]))
        counts[i, classes] = _largest_remainder(np.ones(len(classes)), row_total)
    return counts


def _counts_pls(supply: np.ndarray, spec: PartitionSpec, n_classes: int) -> np.ndarray:
    sizes = _support_sizes(spec, n_classes)
    budgets = np.full(spec.clients, supply.sum() / spec.clients)
    return _counts_skew(supply, sizes, budgets, n_classes, spec.clients)


def _counts_sls(supply: np.ndarray, spec: PartitionSpec, n_classes: int) -> np.ndarray:
    sizes = _support_sizes(spec, n_classes)
    steps = 1.0 + spec.sls_sample_step * np.arange(spec.clients)
    budgets = steps / steps.sum() * supply.sum()
    return _counts_skew(supply, sizes, budgets, n_classes, spec.clients)


def _realize(dataset: Dataset, counts: np.ndarray, rng: np.random.Generator):
    """Deal samples out of shuffled per-class pools according to `counts`."""
    supply = dataset.class_counts()
    over = np.flatnonzero(counts.sum(axis=0) > supply)
    if over.size:
        raise AllocationError(f"allocation overdraws classes {(over + 1).tolist()}")
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    if empty.size:
        raise AllocationError(f"clients {(empty + 1).tolist()} would receive zero samples")

    pools = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c + 1)
        pools.append(rng.permutation(idx))
    cursors = np.zeros(dataset.num_classes, dtype=np.int64)

    clients = []
    for row in counts:
        take = []
        for c, k in enumerate(row):
            if k:
                take.append(pools[c][cursors[c]:cursors[c] + k])
                cursors[c] += k
        indices = np.concatenate(take) if take else np.empty(0, dtype=np.int64)
        clients.append(dataset.subset(np.sort(indices)))
    return clients, LabelAllocation(counts)


def partition(dataset: Dataset, spec: PartitionSpec):
    """Split `dataset` into per-client datasets plus the allocation that tallies them."""
    if spec.regime not in REGIMES:
        raise AllocationError(f"unknown regime {spec.regime!r}")
    if spec.regime in ("maverick", "freerider", "freerider_maverick"):
        return maverick_freerider_split(dataset, spec)

    rng = np.random.default_rng(spec.seed)
    supply = dataset.class_counts()
    if spec.regime == "iid":
        counts = _counts_iid(supply, spec.clients)
    elif spec.regime == "dirichlet":
        counts = _counts_dirichlet(supply, spec.clients, spec.alpha, rng)
    elif spec.regime == "pls":
        counts = _counts_pls(supply, spec, dataset.num_classes)
    else:  # sls
        counts = _counts_sls(supply, spec, dataset.num_classes)
    return _realize(dataset, counts, rng)


def stress_roles(spec: PartitionSpec, num_classes: int):
    """(rare_classes, maverick_client, freerider_client) with defaults resolved.

    Defaults: the last class is the rare one, the last client the Maverick,
    the first client the free-rider; only the roles the regime asks for are set.
    """
    has_maverick = spec.regime in ("maverick", "freerider_maverick")
    has_freerider = spec.regime in ("freerider", "freerider_maverick")
    rare = tuple(spec.rare_classes or ((num_classes,) if has_maverick else ()))
    maverick = (spec.maverick_client or spec.clients) if has_maverick else None
    freerider = (spec.freerider_client or 1) if has_freerider else None
    return rare, maverick, freerider


def maverick_freerider_split(dataset: Dataset, spec: PartitionSpec):
    """Stress splits: a Maverick holding designated rare classes exclusively,
    and/or a free-rider holding a token budget of well-represented classes.
    Remaining clients share the remaining supply IID."""
    n, k = spec.clients, dataset.num_classes
    supply = dataset.class_counts()
    rng = np.random.default_rng(spec.seed)

    if spec.regime not in ("maverick", "freerider", "freerider_maverick"):
        raise AllocationError(f"regime {spec.regime!r} is not a maverick/free-rider split")
    rare, mav, fr = stress_roles(spec, k)

    for c in rare:
        if not 1 <= c <= k:
            raise AllocationError(f"rare class {c} outside 1..{k}")
        if supply[c - 1] == 0:
            raise AllocationError(f"rare class {c} absent from dataset")
    common_default = tuple(c for c in range(1, k + 1) if c not in rare)
    fr_classes = tuple(spec.freerider_classes or common_default)
    if set(rare) & set(fr_classes):
        raise AllocationError("rare-class set and free-rider class set must be disjoint")
    if mav is not None and fr is not None and mav == fr:
        raise AllocationError("maverick and free-rider must be different clients")
    has_maverick, has_freerider = mav is not None, fr is not None

    counts = np.zeros((n, k), dtype=np.int64)
    if has_maverick:
        for c in rare:
            counts[mav - 1, c - 1] = supply[c - 1]
    if has_freerider:
        budget = max(1, int(round(spec.freerider_budget * supply.sum() / n)))
        row = _largest_remainder(np.ones(len(fr_classes)), budget)
        for c, v in zip(fr_classes, row):
            counts[fr - 1, c - 1] = v

    remaining = supply - counts.sum(axis=0)
    rest = [i for i in range(n) if i + 1 not in (mav, fr)]
    if not rest:
        raise AllocationError("no ordinary clients left to hold the remaining supply")
    bulk_classes = [c for c in range(k) if c + 1 not in rare]
    bulk = _counts_iid(remaining[bulk_classes], len(rest))
    for j, i in enumerate(rest):
        counts[i, bulk_classes] = bulk[j]
    return _realize(dataset, counts, rng)
