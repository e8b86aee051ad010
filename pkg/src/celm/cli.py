"""Operator surface: partition | run | sweep | detect | fidelity | report.

Every command reads a flat-text config (or a previous run directory),
writes its outputs into one directory, and exits 0 only when every
requested file was written. Run directories are self-describing: the
verbatim config, the root seeds, a git-describe string and all outputs
land together, so re-running from the stored config reproduces the
outputs byte for byte.
"""

import argparse
import json
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np

from .analysis import DEFAULT_THRESHOLDS, DetectionSweep, fidelity_report
from .config import (ConfigError, ExperimentConfig, config_to_text, load_config,
                     with_warmup_fraction)
from .data import AllocationError, IdxFormatError, LabelAllocation, partition, stress_roles
from .estimator import estimate_distributions, read_contribution_trace, write_contribution_trace
from .experiment import build_datasets, run_experiment, write_trace_csv
from .probe import export_probe_images
from .rng import derive_seed

USAGE_ERROR = 2


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_json(payload, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _prepare_outdir(args, cfg: ExperimentConfig | None = None) -> str:
    out = args.out or (cfg.output_dir if cfg else None)
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    os.makedirs(out, exist_ok=True)
    return out


def _store_config(cfg: ExperimentConfig, outdir: str) -> None:
    with open(os.path.join(outdir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(config_to_text(cfg))


def cmd_partition(args) -> int:
    cfg = load_config(args.config)
    outdir = _prepare_outdir(args, cfg)
    _store_config(cfg, outdir)
    for seed in cfg.seeds:
        train, _ = build_datasets(cfg, seed)
        spec = replace(cfg.partition, seed=derive_seed(seed, "partition"))
        _, allocation = partition(train, spec)
        allocation.to_csv(os.path.join(outdir, f"allocation_seed{seed}.csv"))
        _write_json(allocation.bubble_data(), os.path.join(outdir, f"bubbles_seed{seed}.json"))
    return 0


def _run_one_seed(cfg: ExperimentConfig, seed: int, outdir: str, workers: int,
                  dump_probes: bool) -> dict:
    result = run_experiment(cfg, seed, workers=workers)
    write_trace_csv(result.rows, os.path.join(outdir, f"trace_seed{seed}.csv"))
    write_contribution_trace(result.contributions,
                             os.path.join(outdir, f"contributions_seed{seed}.json"))
    result.allocation.to_csv(os.path.join(outdir, f"allocation_seed{seed}.csv"))
    if dump_probes and result.probe_bank is not None:
        probe_dir = os.path.join(outdir, f"probes_seed{seed}")
        os.makedirs(probe_dir, exist_ok=True)
        _, test = build_datasets(cfg, seed)
        shape = test.image_shape
        names = ["global"] + [f"client_{i}" for i in range(1, result.probe_bank.n_slots)]
        for slot, name in enumerate(names):
            export_probe_images(result.probe_bank.images[slot], probe_dir, name, shape)
    final = result.final
    return {
        "final_accuracy": final["accuracy"],
        "final_balanced_accuracy": final["balanced_accuracy"],
        "final_weights": [final[f"c_{i}"] for i in range(1, cfg.partition.clients + 1)],
        "rare_classes": list(result.rare_classes),
        "freerider_clients": list(result.freerider_clients),
        "rounds": cfg.rounds.total_rounds,
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    outdir = _prepare_outdir(args, cfg)
    workers = args.workers or cfg.workers
    dump = args.dump_probes or cfg.dump_probes
    _store_config(cfg, outdir)
    per_seed = {str(seed): _run_one_seed(cfg, seed, outdir, workers, dump)
                for seed in cfg.seeds}
    summary = {
        "config": config_to_text(cfg),
        "git_describe": git_describe(),
        "strategy": cfg.strategy,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        "mean_final_accuracy": float(np.mean([s["final_accuracy"] for s in per_seed.values()])),
        "mean_final_balanced_accuracy": float(
            np.mean([s["final_balanced_accuracy"] for s in per_seed.values()])),
    }
    _write_json(summary, os.path.join(outdir, "summary.json"))
    return 0


SWEEP_AXES = ("warmup_fraction", "lm_steps", "lm_lr")


def _apply_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "warmup_fraction":
        return with_warmup_fraction(cfg, value)
    if axis == "lm_steps":
        return replace(cfg, probe=replace(cfg.probe, steps=int(value)), raw_text="")
    return replace(cfg, probe=replace(cfg.probe, lm_learning_rate=value), raw_text="")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    outdir = _prepare_outdir(args, cfg)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs a non-empty --values list")
    _store_config(cfg, outdir)
    rows = []
    for raw_value in values:
        swept = _apply_axis(cfg, args.axis, float(raw_value))
        finals = [run_experiment(swept, seed, workers=args.workers or cfg.workers).final
                  for seed in cfg.seeds]
        rows.append({
            "axis": args.axis,
            "value": raw_value,
            "mean_final_accuracy": float(np.mean([f["accuracy"] for f in finals])),
            "mean_final_balanced_accuracy": float(np.mean([f["balanced_accuracy"] for f in finals])),
            "n_seeds": len(cfg.seeds),
        })
    write_trace_csv(rows, os.path.join(outdir, "sweep.csv"))
    return 0


def _load_run(run_dir: str):
    summary = _read_json(os.path.join(run_dir, "summary.json"))
    seeds = summary["seeds"]
    traces = {seed: read_contribution_trace(os.path.join(run_dir, f"contributions_seed{seed}.json"))
              for seed in seeds}
    return summary, traces


def _detect_payload(summary, traces, thresholds) -> dict:
    per_seed = {}
    for seed, records in traces.items():
        info = summary["per_seed"][str(seed)]
        riders = info["freerider_clients"]
        if not riders:
            raise ConfigError("run has no free-rider ground truth; detection is undefined")
        n = len(records[0]["c"])
        labels = np.zeros(n, dtype=bool)
        labels[[i - 1 for i in riders]] = True
        sweep = DetectionSweep.from_rounds([r["c"] for r in records], labels, thresholds)
        per_seed[str(seed)] = {
            "auroc": sweep.mean_auroc(),
            "mean_fpr": sweep.mean_fpr(),
            "mean_tpr": sweep.mean_tpr(),
        }
    return {
        "thresholds": [float(t) for t in thresholds],
        "per_seed": per_seed,
        "mean_auroc": float(np.mean([s["auroc"] for s in per_seed.values()])),
        "mean_fpr": float(np.mean([s["mean_fpr"] for s in per_seed.values()])),
    }


def cmd_detect(args) -> int:
    summary, traces = _load_run(args.run)
    parts = [t.strip() for t in (args.thresholds or "").split(",") if t.strip()]
    thresholds = tuple(float(t) for t in parts) if parts else DEFAULT_THRESHOLDS
    payload = _detect_payload(summary, traces, thresholds)
    outdir = _prepare_outdir(args, None) if args.out else args.run
    _write_json(payload, os.path.join(outdir, "detect.json"))
    rows = [{"seed": seed, **vals} for seed, vals in payload["per_seed"].items()]
    write_trace_csv(rows, os.path.join(outdir, "detect.csv"))
    return 0


def _estimated_global_distribution(records, evidence: str) -> np.ndarray:
    matrices = [np.asarray(r["Q"], dtype=np.float64) for r in records if r["Q"] is not None]
    if not matrices:
        raise ConfigError("trace holds no evidence matrices (not a contribution-aware run?)")
    q = matrices[-1] if evidence == "last" else np.mean(matrices, axis=0)
    _, global_dist = estimate_distributions(q)
    return global_dist


def _fidelity_payload(summary, traces, run_dir, allocation_path, evidence) -> dict:
    per_seed = {}
    for seed, records in traces.items():
        path = allocation_path or os.path.join(run_dir, f"allocation_seed{seed}.csv")
        allocation = LabelAllocation.from_csv(path)
        true_global = allocation.global_distribution()
        estimated = _estimated_global_distribution(records, evidence)
        if estimated.shape != true_global.shape:
            raise ConfigError("allocation and trace disagree on the class count")
        report = fidelity_report(true_global, estimated)
        # Client-averaged variant alongside the global one.
        matrices = [np.asarray(r["Q"]) for r in records if r["Q"] is not None]
        q = matrices[-1] if evidence == "last" else np.mean(matrices, axis=0)
        est_clients, _ = estimate_distributions(q)
        true_clients = allocation.client_distributions()
        client_reports = [fidelity_report(t, e) for t, e in zip(true_clients, est_clients)]
        per_seed[str(seed)] = {
            "global": report.as_dict(),
            "client_mean": {
                key: float(np.mean([getattr(r, key) for r in client_reports]))
                for key in report.as_dict()
            },
            "estimated_dominates": report.estimated_dominates(),
        }
    return {"evidence": evidence, "per_seed": per_seed}


def cmd_fidelity(args) -> int:
    summary, traces = _load_run(args.run)
    payload = _fidelity_payload(summary, traces, args.run, args.allocation, args.evidence)
    outdir = _prepare_outdir(args, None) if args.out else args.run
    _write_json(payload, os.path.join(outdir, "fidelity.json"))
    rows = [{"seed": seed, **vals["global"]} for seed, vals in payload["per_seed"].items()]
    write_trace_csv(rows, os.path.join(outdir, "fidelity.csv"))
    return 0


def cmd_report(args) -> int:
    summary, traces = _load_run(args.run)
    report = {"summary": summary}
    has_riders = any(info["freerider_clients"] for info in summary["per_seed"].values())
    if has_riders:
        report["detection"] = _detect_payload(summary, traces, DEFAULT_THRESHOLDS)
    if any(r["Q"] is not None for records in traces.values() for r in records):
        report["fidelity"] = _fidelity_payload(summary, traces, args.run, None, "mean")
    outdir = _prepare_outdir(args, None) if args.out else args.run
    _write_json(report, os.path.join(outdir, "report.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celm",
                                     description="federated contribution-estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_cmd(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="flat-text config file")
        p.add_argument("-o", "--out", default=None, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add_config_cmd("partition", cmd_partition, "export allocation CSV + bubble-plot JSON")
    p_run = add_config_cmd("run", cmd_run, "run the experiment for every seed")
    p_run.add_argument("--workers", type=int, default=None,
                       help="parallel client workers (default: config value)")
    p_run.add_argument("--dump-probes", action="store_true",
                       help="export final probe images as PGM")
    p_sweep = add_config_cmd("sweep", cmd_sweep, "sweep one hyperparameter axis")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--workers", type=int, default=None)

    def add_run_dir_cmd(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("run", help="run directory produced by `celm run`")
        p.add_argument("-o", "--out", default=None, help="output directory (default: run dir)")
        p.set_defaults(fn=fn)
        return p

    p_detect = add_run_dir_cmd("detect", cmd_detect, "z-score free-rider detection report")
    p_detect.add_argument("--thresholds", default=None, help="comma-separated z thresholds")
    p_fid = add_run_dir_cmd("fidelity", cmd_fidelity, "distribution-fidelity report")
    p_fid.add_argument("--allocation", default=None, help="override the true allocation CSV")
    p_fid.add_argument("--evidence", choices=("mean", "last"), default="mean",
                       help="combine warm-up evidence matrices by mean, or take the last")
    add_run_dir_cmd("report", cmd_report, "combined summary/detection/fidelity report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"celm: config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (AllocationError, IdxFormatError, ValueError) as exc:
        print(f"celm: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"celm: missing file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
