"""Experiment configuration.

Configs are flat ``key = value`` text with dotted section keys, chosen for
diff-friendliness; see the key reference in the README. Parsing is strict:
unknown or duplicate keys are errors, and every value is validated before
any computation starts.
"""

import math
from dataclasses import dataclass, field, replace

from .data import PartitionSpec, REGIMES
from .federation import RoundConfig, STRATEGIES
from .probe import ProbeConfig


class ConfigError(ValueError):
    """A configuration file or mapping is invalid."""


@dataclass
class DataConfig:
    source: str = "synthetic"   # "synthetic" | "idx"
    classes: int = 8
    dim: int = 16
    per_class: int = 200
    test_per_class: int = 100
    separation: float = 2.0
    imbalance: float = 1.0  # largest-to-smallest class supply ratio (train set)
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec("iid", 4))
    rounds: RoundConfig = field(default_factory=lambda: RoundConfig(20))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    strategy: str = "celm"
    ema_factor: float = 0.5
    epsilon: float = 1e-8
    hidden: tuple[int, ...] = (32,)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/experiment"
    workers: int = 1
    dump_probes: bool = False
    raw_text: str = ""


def _to_int(v: str) -> int:
    return int(v)


def _to_float(v: str) -> float:
    return float(v)


def _to_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _to_int_list(v: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in v.split(",") if part.strip())


def _to_str(v: str) -> str:
    return v


KEY_TABLE = {
    "seeds": _to_int_list,
    "output_dir": _to_str,
    "workers": _to_int,
    "dump_probes": _to_bool,
    "model.hidden": _to_int_list,
    "strategy.kind": _to_str,
    "strategy.ema_factor": _to_float,
    "strategy.epsilon": _to_float,
    "data.source": _to_str,
    "data.classes": _to_int,
    "data.dim": _to_int,
    "data.per_class": _to_int,
    "data.test_per_class": _to_int,
    "data.separation": _to_float,
    "data.imbalance": _to_float,
    "data.images": _to_str,
    "data.labels": _to_str,
    "data.test_images": _to_str,
    "data.test_labels": _to_str,
    "partition.regime": _to_str,
    "partition.clients": _to_int,
    "partition.alpha": _to_float,
    "partition.classes_per_client": _to_int_list,
    "partition.sls_min_classes": _to_int,
    "partition.sls_sample_step": _to_float,
    "partition.rare_classes": _to_int_list,
    "partition.maverick_client": _to_int,
    "partition.freerider_classes": _to_int_list,
    "partition.freerider_client": _to_int,
    "partition.freerider_budget": _to_float,
    "rounds.total": _to_int,
    "rounds.local_epochs": _to_int,
    "rounds.batch_size": _to_int,
    "rounds.client_lr": _to_float,
    "rounds.lr_decay_round": _to_int,
    "rounds.lr_decay_factor": _to_float,
    "rounds.warmup": _to_int,
    "rounds.warmup_fraction": _to_float,
    "probe.steps": _to_int,
    "probe.lm_learning_rate": _to_float,
    "probe.reg_weight": _to_float,
}


def parse_flat_text(text: str) -> dict[str, str]:
    """Raw key -> value strings; '#' starts a comment, duplicates are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_mapping(mapping: dict[str, str], raw_text: str = "") -> ExperimentConfig:
    values: dict[str, object] = {}
    for key, raw in mapping.items():
        if key not in KEY_TABLE:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = KEY_TABLE[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    def pick(key, default):
        return values.get(key, default)

    data = DataConfig(
        source=pick("data.source", "synthetic"),
        classes=pick("data.classes", 8),
        dim=pick("data.dim", 16),
        per_class=pick("data.per_class", 200),
        test_per_class=pick("data.test_per_class", 100),
        separation=pick("data.separation", 2.0),
        imbalance=pick("data.imbalance", 1.0),
        images=pick("data.images", None),
        labels=pick("data.labels", None),
        test_images=pick("data.test_images", None),
        test_labels=pick("data.test_labels", None),
    )
    try:
        part = PartitionSpec(
            regime=pick("partition.regime", "iid"),
            clients=pick("partition.clients", 4),
            alpha=pick("partition.alpha", None),
            classes_per_client=pick("partition.classes_per_client", None),
            sls_min_classes=pick("partition.sls_min_classes", 2),
            sls_sample_step=pick("partition.sls_sample_step", 1.0),
            rare_classes=pick("partition.rare_classes", None),
            maverick_client=pick("partition.maverick_client", None),
            freerider_classes=pick("partition.freerider_classes", None),
            freerider_client=pick("partition.freerider_client", None),
            freerider_budget=pick("partition.freerider_budget", 0.01),
        )
        total = pick("rounds.total", 20)
        if "rounds.warmup" in values:
            warmup = values["rounds.warmup"]
        else:
            warmup = math.ceil(pick("rounds.warmup_fraction", 0.05) * total)
        rounds = RoundConfig(
            total_rounds=total,
            local_epochs=pick("rounds.local_epochs", 1),
            batch_size=pick("rounds.batch_size", 128),
            client_lr=pick("rounds.client_lr", 0.1),
            lr_decay_round=pick("rounds.lr_decay_round", None),
            lr_decay_factor=pick("rounds.lr_decay_factor", 0.1),
            warmup_horizon=warmup,
        )
        probe = ProbeConfig(
            steps=pick("probe.steps", 200),
            lm_learning_rate=pick("probe.lm_learning_rate", 0.01),
            reg_weight=pick("probe.reg_weight", 0.001),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cfg = ExperimentConfig(
        data=data,
        partition=part,
        rounds=rounds,
        probe=probe,
        strategy=pick("strategy.kind", "celm"),
        ema_factor=pick("strategy.ema_factor", 0.5),
        epsilon=pick("strategy.epsilon", 1e-8),
        hidden=pick("model.hidden", (32,)),
        seeds=pick("seeds", (0,)),
        output_dir=pick("output_dir", "runs/experiment"),
        workers=pick("workers", 1),
        dump_probes=pick("dump_probes", False),
        raw_text=raw_text,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}; choose from {STRATEGIES}")
    if cfg.partition.regime not in REGIMES:
        raise ConfigError(f"unknown partition regime {cfg.partition.regime!r}")
    if cfg.data.source not in ("synthetic", "idx"):
        raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {cfg.data.source!r}")
    if cfg.data.source == "idx":
        missing = [k for k in ("images", "labels", "test_images", "test_labels")
                   if getattr(cfg.data, k) is None]
        if missing:
            raise ConfigError(f"idx source needs data.{'/data.'.join(missing)}")
    else:
        if cfg.data.classes < 2 or cfg.data.dim < 2 or cfg.data.per_class < 1:
            raise ConfigError("synthetic data needs classes >= 2, dim >= 2, per_class >= 1")
    if not cfg.seeds:
        raise ConfigError("need at least one seed")
    if not all(h > 0 for h in cfg.hidden):
        raise ConfigError("hidden layer widths must be positive")
    if not 0.0 <= cfg.ema_factor < 1.0:
        raise ConfigError("strategy.ema_factor must lie in [0, 1)")
    if cfg.epsilon <= 0:
        raise ConfigError("strategy.epsilon must be positive")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.rounds.batch_size < 1 or cfg.rounds.local_epochs < 1:
        raise ConfigError("rounds.batch_size and rounds.local_epochs must be >= 1")


def load_config_text(text: str) -> ExperimentConfig:
    return config_from_mapping(parse_flat_text(text), raw_text=text)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        return load_config_text(f.read())


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical flat-text form (used when a config was built in code)."""
    if cfg.raw_text:
        return cfg.raw_text
    lines = [
        f"seeds = {','.join(str(s) for s in cfg.seeds)}",
        f"output_dir = {cfg.output_dir}",
        f"workers = {cfg.workers}",
        f"dump_probes = {str(cfg.dump_probes).lower()}",
        f"model.hidden = {','.join(str(h) for h in cfg.hidden)}",
        f"strategy.kind = {cfg.strategy}",
        f"strategy.ema_factor = {cfg.ema_factor!r}",
        f"strategy.epsilon = {cfg.epsilon!r}",
        f"data.source = {cfg.data.source}",
    ]
    if cfg.data.source == "synthetic":
        lines += [
            f"data.classes = {cfg.data.classes}",
            f"data.dim = {cfg.data.dim}",
            f"data.per_class = {cfg.data.per_class}",
            f"data.test_per_class = {cfg.data.test_per_class}",
            f"data.separation = {cfg.data.separation!r}",
            f"data.imbalance = {cfg.data.imbalance!r}",
        ]
    else:
        lines += [
            f"data.images = {cfg.data.images}",
            f"data.labels = {cfg.data.labels}",
            f"data.test_images = {cfg.data.test_images}",
            f"data.test_labels = {cfg.data.test_labels}",
        ]
    p = cfg.partition
    lines += [f"partition.regime = {p.regime}", f"partition.clients = {p.clients}"]
    if p.alpha is not None:
        lines.append(f"partition.alpha = {p.alpha!r}")
    if p.classes_per_client is not None:
        cpc = p.classes_per_client
        csv = str(cpc) if isinstance(cpc, int) else ",".join(str(v) for v in cpc)
        lines.append(f"partition.classes_per_client = {csv}")
    if p.rare_classes:
        lines.append(f"partition.rare_classes = {','.join(str(c) for c in p.rare_classes)}")
    if p.maverick_client:
        lines.append(f"partition.maverick_client = {p.maverick_client}")
    if p.freerider_classes:
        lines.append(f"partition.freerider_classes = {','.join(str(c) for c in p.freerider_classes)}")
    if p.freerider_client:
        lines.append(f"partition.freerider_client = {p.freerider_client}")
    lines += [
        f"partition.sls_min_classes = {p.sls_min_classes}",
        f"partition.sls_sample_step = {p.sls_sample_step!r}",
        f"partition.freerider_budget = {p.freerider_budget!r}",
    ]
    r = cfg.rounds
    lines += [
        f"rounds.total = {r.total_rounds}",
        f"rounds.local_epochs = {r.local_epochs}",
        f"rounds.batch_size = {r.batch_size}",
        f"rounds.client_lr = {r.client_lr!r}",
        f"rounds.lr_decay_factor = {r.lr_decay_factor!r}",
        f"rounds.warmup = {r.resolved_warmup()}",
    ]
    if r.lr_decay_round is not None:
        lines.append(f"rounds.lr_decay_round = {r.lr_decay_round}")
    lines += [
        f"probe.steps = {cfg.probe.steps}",
        f"probe.lm_learning_rate = {cfg.probe.lm_learning_rate!r}",
        f"probe.reg_weight = {cfg.probe.reg_weight!r}",
    ]
    return "\n".join(lines) + "\n"


def with_warmup_fraction(cfg: ExperimentConfig, fraction: float) -> ExperimentConfig:
    """Copy of cfg with the warm-up horizon recomputed from a fraction of T."""
    rounds = replace(cfg.rounds, warmup_horizon=math.ceil(fraction * cfg.rounds.total_rounds))
    return replace(cfg, rounds=rounds, raw_text="")
