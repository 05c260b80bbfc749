"""Synthetic workload generation and trace file round-tripping.

Poisson arrivals, random LS tagging, lognormal prompt/output lengths (a
heavy-tailed stand-in for conversational traces), all fully determined by the
spec's rng seed.  Trace files are newline-delimited text, one record per
line, field order: arrival_ms, priority, prompt_len, output_len, seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import Priority

TRACE_HEADER = "arrival_ms,priority,prompt_len,output_len,seed"


@dataclass(frozen=True)
class WorkloadSpec:
    """Generator parameters; lognormal means are the distribution means, not log-space."""

    arrival_rate: float = 2.0            # jobs per virtual second
    ls_fraction: float = 0.20
    prompt_mean: float = 180.0
    prompt_sigma: float = 0.8
    prompt_bounds: tuple[int, int] = (4, 2048)
    output_mean: float = 220.0
    output_sigma: float = 0.9
    output_bounds: tuple[int, int] = (1, 512)
    duration_s: float = 60.0
    seed: int = 0

    def validate(self) -> None:
        if self.arrival_rate <= 0:
            raise ValueError("arrival rate must be positive")
        if not (0.0 <= self.ls_fraction <= 1.0):
            raise ValueError("ls_fraction must lie in [0, 1]")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        for mean, sigma, bounds in (
            (self.prompt_mean, self.prompt_sigma, self.prompt_bounds),
            (self.output_mean, self.output_sigma, self.output_bounds),
        ):
            if mean <= 0 or sigma < 0:
                raise ValueError("length distributions need positive mean and non-negative sigma")
            if bounds[0] < 1 or bounds[1] < bounds[0]:
                raise ValueError(f"bad clamp bounds {bounds}")


@dataclass(frozen=True)
class TraceRecord:
    """One job of a trace; prompt token ids derive from the per-record seed."""

    id: int
    arrival_ms: float
    priority: Priority
    prompt_len: int
    max_new_tokens: int
    prompt_seed: int

    def prompt_tokens(self, vocab_size: int) -> list[int]:
        """Deterministic prompt ids in [1, vocab); id 0 is reserved for end-of-sequence."""
        rng = np.random.default_rng(self.prompt_seed)
        return [int(t) for t in rng.integers(1, vocab_size, size=self.prompt_len)]


def _lognormal_lengths(rng: np.random.Generator, n: int, mean: float, sigma: float, bounds: tuple[int, int]) -> np.ndarray:
    """Lengths with the requested distribution mean, clamped to bounds."""
    mu = math.log(mean) - 0.5 * sigma * sigma
    raw = rng.lognormal(mean=mu, sigma=sigma, size=n)
    return np.clip(np.rint(raw).astype(int), bounds[0], bounds[1])


def generate(spec: WorkloadSpec) -> list[TraceRecord]:
    """Draw a trace: exponential inter-arrival gaps, independent LS marking, seeded lengths."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    arrivals = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / spec.arrival_rate)
        if t > spec.duration_s:
            break
        arrivals.append(t * 1000.0)
    n = len(arrivals)
    ls_mask = rng.random(n) < spec.ls_fraction
    prompt_lens = _lognormal_lengths(rng, n, spec.prompt_mean, spec.prompt_sigma, spec.prompt_bounds)
    output_lens = _lognormal_lengths(rng, n, spec.output_mean, spec.output_sigma, spec.output_bounds)
    prompt_seeds = rng.integers(0, 2**31 - 1, size=n) if n else []
    return [
        TraceRecord(
            id=i,
            arrival_ms=arrivals[i],
            priority=Priority.LATENCY_SENSITIVE if ls_mask[i] else Priority.BEST_EFFORT,
            prompt_len=int(prompt_lens[i]),
            max_new_tokens=int(output_lens[i]),
            prompt_seed=int(prompt_seeds[i]),
        )
        for i in range(n)
    ]


def save_trace(records: list[TraceRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for rec in records:
            fh.write(
                f"{rec.arrival_ms!r},{rec.priority.tag},{rec.prompt_len},{rec.max_new_tokens},{rec.prompt_seed}\n"
            )


def load_trace(path: str) -> list[TraceRecord]:
    """Parse a trace file; malformed lines and unsorted arrivals are rejected with the line number."""
    records: list[TraceRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line == TRACE_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, found {len(parts)}")
            try:
                rec = TraceRecord(
                    id=len(records),
                    arrival_ms=float(parts[0]),
                    priority=Priority.from_tag(parts[1]),
                    prompt_len=int(parts[2]),
                    max_new_tokens=int(parts[3]),
                    prompt_seed=int(parts[4]),
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if rec.prompt_len < 1 or rec.max_new_tokens < 1:
                raise ValueError(f"{path}:{lineno}: lengths must be >= 1")
            if records and rec.arrival_ms < records[-1].arrival_ms:
                raise ValueError(f"{path}:{lineno}: arrival times out of order")
            records.append(rec)
    return records
