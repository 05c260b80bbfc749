"""Experiment runner.

Subcommands mirror the experiment lifecycle: ``run`` executes a scheduler x
rate sweep and emits jobs/summary CSVs plus a comparison table, ``calibrate``
rescales the cost model onto a target decode-iteration window, ``gen-trace``
materializes a workload file, and ``compare`` pretty-prints a summary CSV.

Configuration lives in a single JSON file; repeatable flags override the
file.  Exit codes: 0 success, 1 configuration error, 2 simulation invariant
violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

from .core import Phase, Priority, SchedulerDirective, SimulationError, batch_form, sequence_new
from .engine import Completed, CostModel, InferenceEngine, VirtualClock
from .metrics import (
    AggregateReport,
    SUMMARY_FIELDS,
    aggregate,
    summary_row,
    write_jobs_csv,
    write_summary_csv,
)
from .model import ModelConfig, MoEModel, UnifiedDynamicCache
from .sim import RunResult, SCHEDULER_NAMES, run_simulation
from .workload import TraceRecord, WorkloadSpec, generate, load_trace, save_trace

import numpy as np

# Context length (tokens already cached per member) of the canonical
# calibration iteration; matches the default workload's mean prompt length.
CANONICAL_CONTEXT = 180
CALIBRATION_BATCH = 32
CALIBRATION_LAYERS = 32


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cost: CostModel = field(default_factory=CostModel)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    schedulers: list[str] = field(default_factory=lambda: ["baseline", "qllm"])
    rates: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
    max_batch_size: int = 32
    slo_ms: float = 3000.0
    seed: int = 0
    jobs_per_run: Optional[int] = None
    trace_path: Optional[str] = None
    out_dir: str = "out"
    cache_capacity_bytes: float = 8 * 1024**3

    def validate(self) -> None:
        if self.max_batch_size < 1:
            raise ConfigError("max_batch_size: must be >= 1")
        if not self.schedulers:
            raise ConfigError("schedulers: at least one scheduler must be named")
        for name in self.schedulers:
            if name not in SCHEDULER_NAMES:
                raise ConfigError(f"schedulers: unknown scheduler {name!r}")
        if self.trace_path is None and not self.rates:
            raise ConfigError("rates: at least one rate is required without a trace file")
        if any(r <= 0 for r in self.rates):
            raise ConfigError("rates: rates must be positive")
        if self.slo_ms <= 0:
            raise ConfigError("slo_ms: must be positive")
        if self.jobs_per_run is not None and self.jobs_per_run < 1:
            raise ConfigError("jobs_per_run: must be >= 1")
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        try:
            self.cost.validate()
        except ValueError as exc:
            raise ConfigError(f"cost: {exc}") from None
        try:
            self.workload.validate()
        except ValueError as exc:
            raise ConfigError(f"workload: {exc}") from None


def _build_section(section: str, data: dict, cls, defaults):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    merged = {}
    for key, value in data.items():
        if key in ("prompt_bounds", "output_bounds"):
            value = tuple(value)
        merged[key] = value
    try:
        return replace(defaults, **merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level: expected a JSON object")
    cfg = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")
    plain = {k: v for k, v in data.items() if k not in ("model", "cost", "workload")}
    try:
        cfg = replace(cfg, **plain)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"top level: {exc}") from None
    if "model" in data:
        cfg = replace(cfg, model=_build_section("model", data["model"], ModelConfig, ModelConfig()))
    if "cost" in data:
        cfg = replace(cfg, cost=_build_section("cost", data["cost"], CostModel, CostModel()))
    if "workload" in data:
        cfg = replace(cfg, workload=_build_section("workload", data["workload"], WorkloadSpec, WorkloadSpec()))
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file: invalid JSON ({exc})") from None
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": dataclasses.asdict(cfg.model),
        "cost": dataclasses.asdict(cfg.cost),
        "workload": {
            **dataclasses.asdict(cfg.workload),
            "prompt_bounds": list(cfg.workload.prompt_bounds),
            "output_bounds": list(cfg.workload.output_bounds),
        },
        "schedulers": list(cfg.schedulers),
        "rates": list(cfg.rates),
        "max_batch_size": cfg.max_batch_size,
        "slo_ms": cfg.slo_ms,
        "seed": cfg.seed,
        "jobs_per_run": cfg.jobs_per_run,
        "trace_path": cfg.trace_path,
        "out_dir": cfg.out_dir,
        "cache_capacity_bytes": cfg.cache_capacity_bytes,
    }


# ---------------------------------------------------------------------------
# trace construction


def trace_for_rate(cfg: ExperimentConfig, rate: float) -> list[TraceRecord]:
    """One deterministic trace per (config seed, rate), shared across schedulers.

    With jobs_per_run set, the Poisson stream is truncated to exactly that
    many requests so every rate dispatches the same-sized request set.
    """
    if cfg.trace_path is not None:
        return load_trace(cfg.trace_path)
    seed = cfg.seed * 1_000_003 + int(round(rate * 1000))
    spec = replace(cfg.workload, arrival_rate=rate, seed=seed)
    if cfg.jobs_per_run is None:
        return generate(spec)
    horizon = max(4.0 * cfg.jobs_per_run / rate, spec.duration_s)
    for _ in range(8):
        records = generate(replace(spec, duration_s=horizon))
        if len(records) >= cfg.jobs_per_run:
            return records[: cfg.jobs_per_run]
        horizon *= 2
    raise ConfigError("jobs_per_run: could not draw enough arrivals; rate too low?")


# ---------------------------------------------------------------------------
# calibration


import functools


@functools.lru_cache(maxsize=32)
def calibration_iteration_ms(model_config: ModelConfig, cost_model: CostModel) -> float:
    """Measure one canonical decode iteration: batch 32, 32 layers, 180-token contexts.

    The measurement runs the real engine end to end (prefill to populate the
    caches, then one timed decode iteration), so it reflects actual routing
    and queue occupancy rather than a closed-form estimate.  Both configs are
    frozen, so repeated measurements are memoized.
    """
    config = replace(model_config, num_layers=CALIBRATION_LAYERS)
    model = MoEModel(config)
    clock = VirtualClock()
    cache = UnifiedDynamicCache(config.num_layers, config.hidden_dim)
    engine = InferenceEngine(model, cache, clock, cost_model, CALIBRATION_BATCH)
    rng = np.random.default_rng(config.seed + 1)
    seqs = []
    for i in range(CALIBRATION_BATCH):
        prompt = [int(t) for t in rng.integers(1, config.vocab_size, size=CANONICAL_CONTEXT)]
        seq = sequence_new(prompt, priority=Priority.BEST_EFFORT, max_new_tokens=4, arrival=0.0, seq_id=i)
        seq.cache_handle = i
        cache.register(i)
        seqs.append(seq)

    def cont(report):
        return SchedulerDirective.CONTINUE
    prefill = batch_form(seqs, Phase.PREFILL, CALIBRATION_BATCH, engine.next_batch_id())
    outcome = engine.execute(prefill, seqs, cont)
    assert isinstance(outcome, Completed)
    for seq in seqs:
        seq.generated.append(outcome.tokens[seq.id])
        seq.advance_phase(Phase.DECODE)
    decode = batch_form(seqs, Phase.DECODE, CALIBRATION_BATCH, engine.next_batch_id())
    start = clock.now
    outcome = engine.execute(decode, seqs, cont)
    assert isinstance(outcome, Completed)
    return clock.now - start


def calibrate(model_config: ModelConfig, cost_model: CostModel, target_lo: float, target_hi: float) -> CostModel:
    """Rescale the cost model so the canonical decode iteration hits the target window.

    Stage charges are jointly linear in the parameters, so scaling every
    parameter by target/measured lands exactly on the window midpoint; the
    scaled model is re-measured as a closed-loop check.
    """
    if target_hi <= 0 or target_lo < 0 or target_lo > target_hi:
        raise ValueError(f"infeasible target range [{target_lo}, {target_hi}]")
    measured = calibration_iteration_ms(model_config, cost_model)
    if measured <= 0:
        raise ValueError("cost model charges nothing; cannot calibrate")
    mid = 0.5 * (target_lo + target_hi)
    scaled = cost_model.scaled(mid / measured)
    check = calibration_iteration_ms(model_config, scaled)
    if not (target_lo <= check <= target_hi):
        raise ValueError(f"calibration landed at {check:.3f} ms, outside [{target_lo}, {target_hi}]")
    return scaled


# ---------------------------------------------------------------------------
# experiment execution


def _audit_indices(seed: int, jobs: int, layers: int) -> set[int]:
    """64 report indices sampled from a conservative lower bound on report count."""
    floor = max(64, jobs * layers * 3)
    rng = np.random.default_rng(seed ^ 0x5EED)
    return {int(i) for i in rng.choice(np.arange(1, floor + 1), size=min(64, floor), replace=False)}


def run_experiment(cfg: ExperimentConfig, quiet: bool = False):
    """Run every (scheduler, rate) pair; returns {(scheduler, rate): (RunResult, AggregateReport)}."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    results: dict[tuple[str, float], tuple[RunResult, AggregateReport]] = {}
    rows = []
    rates = cfg.rates if cfg.trace_path is None else [0.0]
    for rate in rates:
        trace = trace_for_rate(cfg, rate if rate > 0 else cfg.workload.arrival_rate)
        audits = _audit_indices(cfg.seed, len(trace), cfg.model.num_layers)
        reports: dict[str, AggregateReport] = {}
        runs: dict[str, RunResult] = {}
        ordered = sorted(cfg.schedulers, key=lambda s: 0 if s == "baseline" else 1)
        for scheduler in ordered:
            result = run_simulation(
                trace,
                model_config=cfg.model,
                cost_model=cfg.cost,
                scheduler=scheduler,
                max_batch_size=cfg.max_batch_size,
                cache_capacity_bytes=cfg.cache_capacity_bytes,
                audit_report_indices=audits,
            )
            reference = reports.get("baseline")
            report = aggregate(result.records, cfg.slo_ms, result.makespan_ms, reference)
            reports[scheduler] = report
            runs[scheduler] = result
            results[(scheduler, rate)] = (result, report)
        for scheduler in cfg.schedulers:
            run_dir = os.path.join(cfg.out_dir, f"{scheduler}_rate{rate:g}")
            os.makedirs(run_dir, exist_ok=True)
            write_jobs_csv(runs[scheduler].records, os.path.join(run_dir, "jobs.csv"))
            rows.append(summary_row(scheduler, rate, reports[scheduler]))
    write_summary_csv(rows, os.path.join(cfg.out_dir, "summary.csv"))
    if not quiet:
        print_comparison(rows)
    return results


def print_comparison(rows: list[dict[str, str]]) -> None:
    """Human-readable comparison with LS and BE breakdowns per scheduler and rate."""
    columns = [
        ("scheduler", 14), ("rate", 5), ("jobs", 5),
        ("ls_mean_ttft_ms", 16), ("ls_slo_attainment", 17),
        ("ls_mean_turnaround_ms", 21), ("be_mean_ttft_ms", 16),
        ("be_mean_turnaround_ms", 21), ("completion_rate_jps", 19),
        ("be_slowdown_vs_reference", 24),
    ]
    header = " ".join(name.ljust(width) for name, width in columns)
    print(header)
    print("-" * len(header))
    for row in rows:
        print(" ".join(str(row.get(name, "")).ljust(width) for name, width in columns))


# ---------------------------------------------------------------------------
# argument parsing and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesim", description="MoE inference scheduling simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured scheduler x rate sweep")
    run_p.add_argument("--config", required=True, help="path to the experiment JSON config")
    run_p.add_argument("--scheduler", action="append", default=None, help="override scheduler list (repeatable)")
    run_p.add_argument("--rate", action="append", type=float, default=None, help="override rate list (repeatable)")
    run_p.add_argument("--seed", type=int, default=None, help="override the global seed")
    run_p.add_argument("--out", default=None, help="override the output directory")
    run_p.add_argument("--quiet", action="store_true", help="suppress the comparison table")

    cal_p = sub.add_parser("calibrate", help="rescale the cost model onto a decode-iteration target")
    cal_p.add_argument("--config", required=True)
    cal_p.add_argument("--target-lo", type=float, default=300.0)
    cal_p.add_argument("--target-hi", type=float, default=400.0)
    cal_p.add_argument("--out", default=None, help="where to write the updated config (default: in place)")

    gen_p = sub.add_parser("gen-trace", help="generate a workload trace file")
    gen_p.add_argument("--config", required=True)
    gen_p.add_argument("--rate", type=float, default=None, help="override the workload arrival rate")
    gen_p.add_argument("--seed", type=int, default=None)
    gen_p.add_argument("--out", required=True, help="trace file to write")

    cmp_p = sub.add_parser("compare", help="print the comparison table for an existing summary.csv")
    cmp_p.add_argument("--summary", required=True, help="path to summary.csv")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.scheduler:
        cfg = replace(cfg, schedulers=list(args.scheduler))
    if args.rate:
        cfg = replace(cfg, rates=list(args.rate))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    cfg.validate()
    run_experiment(cfg, quiet=args.quiet)
    return 0


def _cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    calibrated = calibrate(cfg.model, cfg.cost, args.target_lo, args.target_hi)
    cfg = replace(cfg, cost=calibrated)
    out_path = args.out or args.config
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
    achieved = calibration_iteration_ms(cfg.model, calibrated)
    print(f"calibrated decode iteration: {achieved:.3f} ms (target [{args.target_lo}, {args.target_hi}])")
    print(f"written to {out_path}")
    return 0


def _cmd_gen_trace(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.workload
    if args.rate is not None:
        spec = replace(spec, arrival_rate=args.rate)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    records = generate(spec)
    save_trace(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    with open(args.summary, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0].split(",") != SUMMARY_FIELDS:
        raise ConfigError("summary: unrecognized header")
    rows = [dict(zip(SUMMARY_FIELDS, line.split(","))) for line in lines[1:]]
    print_comparison(rows)
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    handlers = {
        "run": _cmd_run,
        "calibrate": _cmd_calibrate,
        "gen-trace": _cmd_gen_trace,
        "compare": _cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except SimulationError as exc:
        print(f"simulation invariant violation: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
