"""Scratch: desk-scale trend exploration for acceptance tuning (not shipped)."""
import sys
import time
from dataclasses import replace

import numpy as np

from celm.config import DataConfig, ExperimentConfig
from celm.data import AllocationError, PartitionSpec, partition, synth_dataset
from celm.experiment import run_experiment
from celm.federation import RoundConfig
from celm.probe import ProbeConfig
from celm.rng import derive_seed


def base_config(regime, strategy, **kw):
    spec_kw = {}
    if regime == "dirichlet":
        spec_kw["alpha"] = kw.pop("alpha", 0.05)
    return ExperimentConfig(
        data=DataConfig(classes=kw.pop("classes", 8), dim=kw.pop("dim", 16),
                        per_class=kw.pop("per_class", 200), test_per_class=100,
                        separation=kw.pop("separation", 2.0),
                        imbalance=kw.pop("imbalance", 1.0)),
        partition=PartitionSpec(regime, kw.pop("clients", 5), **spec_kw),
        rounds=RoundConfig(total_rounds=kw.pop("T", 40), client_lr=kw.pop("lr", 0.1), batch_size=kw.pop("batch", 128),
                           warmup_horizon=kw.pop("warmup", None),
                           local_epochs=kw.pop("epochs", 1)),
        probe=ProbeConfig(steps=kw.pop("steps", 200), lm_learning_rate=kw.pop("eta", 0.01),
                          reg_weight=kw.pop("reg", 0.001)),
        strategy=strategy,
        hidden=kw.pop("hidden", (32,)),
    )


def valid_seeds(cfg, want=3, start=0):
    seeds, seed = [], start
    while len(seeds) < want:
        try:
            train = synth_dataset(cfg.data.classes, cfg.data.per_class, cfg.data.dim,
                                  derive_seed(seed, "data"), cfg.data.separation)
            partition(train, replace(cfg.partition, seed=derive_seed(seed, "partition")))
            seeds.append(seed)
        except AllocationError:
            pass
        seed += 1
    return seeds


def run_split(regime, seeds=None, **kw):
    out = {}
    probe_cfg = {k: kw[k] for k in ("steps", "eta") if k in kw}
    cfg0 = base_config(regime, "celm", **dict(kw))
    if seeds is None:
        seeds = valid_seeds(cfg0)
    for strategy in ("uniform", "celm", "cgsv"):
        cfg = base_config(regime, strategy, **dict(kw))
        finals, rares = [], []
        t0 = time.time()
        for seed in seeds:
            res = run_experiment(cfg, seed)
            finals.append(res.rows[-1]["balanced_accuracy"])
            if res.rare_classes:
                from celm.federation import evaluate
                from celm.experiment import build_datasets
                _, test = build_datasets(cfg, seed)
                m = evaluate(res.final_model, test, res.rare_classes)
                rares.append(m["rare_class_accuracy"])
        out[strategy] = (np.mean(finals), np.std(finals), np.mean(rares) if rares else None,
                         time.time() - t0)
    return seeds, out


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    kw = {}
    for arg in sys.argv[2:]:
        k, v = arg.split("=")
        kw[k] = float(v) if "." in v else int(v)
    regimes = ["dirichlet", "pls", "sls", "maverick", "freerider"] if which == "all" else [which]
    for regime in regimes:
        seeds, out = run_split(regime, **dict(kw))
        print(f"== {regime} seeds={seeds} {kw}")
        for s, (m, sd, rare, dt) in out.items():
            rare_txt = f" rare={rare:.3f}" if rare is not None else ""
            print(f"  {s:8s} balanced={m:.4f}±{sd:.4f}{rare_txt}  ({dt:.1f}s)")
