"""Simulation driver: admits trace arrivals on the virtual clock, pulls
batches from the active scheduler, runs them on the engine, and routes
outputs, collecting per-job metrics and diagnostic probes along the way.

Arrivals become visible to the scheduler before every engine report is
answered, so a policy reacts to an arrival at the first stage boundary after
its arrival time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (
    Batch,
    CacheCapacityError,
    Phase,
    Priority,
    Sequence,
    SimulationError,
    batch_form,
    sequence_new,
)
from .engine import Completed, CostModel, InferenceEngine, Preempted, VirtualClock
from .metrics import JobRecord, MetricsRecorder
from .model import ModelConfig, MoEModel, UnifiedDynamicCache
from .sched import BaselineScheduler, Policy, POLICIES, QllmScheduler
from .workload import TraceRecord

SCHEDULER_NAMES = ("qllm", "baseline", "never-preempt")


@dataclass
class IterationRecord:
    """One engine dispatch: wall = virtual interval, phase, size, outcome."""

    start_ms: float
    end_ms: float
    phase: Phase
    size: int
    preempted: bool

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms


@dataclass
class RunProbes:
    """Diagnostics collected during a run, used by the verification suite."""

    prefill_start: dict[int, float] = field(default_factory=dict)
    iterations: list[IterationRecord] = field(default_factory=list)
    preemptions: int = 0
    max_stage_cost_ms: float = 0.0
    checkpoint_cost_ms: float = 0.0
    restore_cost_ms: float = 0.0
    ledger_audits: int = 0
    ledger_mismatches: int = 0
    final_cache_bytes: int = 0


@dataclass
class RunResult:
    scheduler: str
    records: list[JobRecord]
    makespan_ms: float
    probes: RunProbes
    sequences: dict[int, Sequence]


def make_scheduler(name: str, cache: UnifiedDynamicCache, max_batch_size: int, policy: Optional[Policy] = None):
    if name == "baseline":
        return BaselineScheduler(cache, max_batch_size)
    if name == "qllm":
        return QllmScheduler(cache, max_batch_size, policy or POLICIES["qllm"])
    if name == "never-preempt":
        return QllmScheduler(cache, max_batch_size, policy or POLICIES["never-preempt"])
    raise ValueError(f"unknown scheduler {name!r}; expected one of {SCHEDULER_NAMES}")


class Simulation:
    """Single-run simulation loop; owns every mutable component."""

    def __init__(
        self,
        trace: list[TraceRecord],
        model_config: ModelConfig = ModelConfig(),
        cost_model: CostModel = CostModel(),
        scheduler: str = "qllm",
        max_batch_size: int = 32,
        cache_capacity_bytes: float = 8 * 1024**3,
        policy: Optional[Policy] = None,
        audit_report_indices: Optional[set[int]] = None,
        max_virtual_ms: float = 1e10,
    ):
        self.trace = sorted(trace, key=lambda r: (r.arrival_ms, r.id))
        self.model = MoEModel(model_config)
        self.clock = VirtualClock()
        self.cache = UnifiedDynamicCache(
            model_config.num_layers, model_config.hidden_dim, cache_capacity_bytes
        )
        self.engine = InferenceEngine(self.model, self.cache, self.clock, cost_model, max_batch_size)
        self.scheduler_name = scheduler
        self.scheduler = make_scheduler(scheduler, self.cache, max_batch_size, policy)
        self.recorder = MetricsRecorder()
        self.probes = RunProbes()
        self.audit_report_indices = audit_report_indices or set()
        self.max_virtual_ms = max_virtual_ms
        self._arrival_index = 0
        self._report_counter = 0
        self._reserved: dict[int, int] = {}
        self._reserved_total = 0

    # -- arrival handling ------------------------------------------------

    def _admit_until(self, now_ms: float) -> None:
        while self._arrival_index < len(self.trace):
            rec = self.trace[self._arrival_index]
            if rec.arrival_ms > now_ms:
                break
            seq = sequence_new(
                prompt=rec.prompt_tokens(self.model.config.vocab_size),
                priority=rec.priority,
                max_new_tokens=rec.max_new_tokens,
                arrival=rec.arrival_ms,
                seq_id=rec.id,
            )
            seq.cache_handle = seq.id
            self.cache.register(seq.id)
            self.scheduler.dispatch_arrival(seq)
            self._arrival_index += 1

    def _on_report(self, report):
        self._admit_until(report.timestamp)
        self._report_counter += 1
        if self._report_counter in self.audit_report_indices:
            self.probes.ledger_audits += 1
            if self.cache.recount_bytes() != self.cache.usage_bytes():
                self.probes.ledger_mismatches += 1
        return self.scheduler.on_engine_report(report)

    # -- cache admission ---------------------------------------------------
    #
    # A sequence's whole-lifetime KV footprint (prompt plus maximum output,
    # across all layers) is reserved when its prefill batch is first
    # dispatched and released when it finishes.  Decode growth is therefore
    # always covered and can never deadlock on a full cache; only prefill
    # batches face admission control.

    def _footprint_bytes(self, seq: Sequence) -> int:
        tokens = seq.prompt_len + seq.max_new_tokens
        return tokens * self.model.config.num_layers * self.cache.entry_bytes

    def _admit_prefill(self, seqs: list[Sequence]) -> list[Sequence]:
        """Trim a fresh prefill selection until every kept member's lifetime
        footprint fits the remaining capacity; trimmed members rejoin their
        queue heads."""
        kept = list(seqs)
        while kept:
            need = sum(self._footprint_bytes(s) for s in kept if s.id not in self._reserved)
            if self._reserved_total + need <= self.cache.capacity_bytes:
                break
            kept.pop()
        if not kept and self._reserved_total == 0:
            raise CacheCapacityError(
                f"sequence {seqs[0].id} can never fit: lifetime footprint "
                f"{self._footprint_bytes(seqs[0])} bytes exceeds capacity {self.cache.capacity_bytes}"
            )
        if len(kept) < len(seqs):
            self.scheduler.requeue_front([s.id for s in seqs[len(kept):]])
        for seq in kept:
            if seq.id not in self._reserved:
                self._reserved[seq.id] = self._footprint_bytes(seq)
                self._reserved_total += self._reserved[seq.id]
        return kept

    def _release_reservation(self, seq_id: int) -> None:
        self._reserved_total -= self._reserved.pop(seq_id, 0)

    # -- main loop ---------------------------------------------------------

    def _materialize(self, selection) -> Optional[tuple[list[Sequence], Batch]]:
        """Turn a selection into an executable batch, or None if admission refused it."""
        seqs = [self.scheduler.sequences[sid] for sid in selection.seq_ids]
        if selection.resume:
            batch = self.engine.restore(seqs)
            self.probes.restore_cost_ms += self.engine.cost.restore_cost * len(seqs)
            return seqs, batch
        if selection.phase is Phase.PREFILL:
            seqs = self._admit_prefill(seqs)
            if not seqs:
                return None
        batch = batch_form(seqs, selection.phase, self.engine.max_batch_size, self.engine.next_batch_id())
        return seqs, batch

    def run(self) -> RunResult:
        while True:
            self._admit_until(self.clock.now)
            self._check_conservation()
            selection = self.scheduler.get_next_batch()
            if selection is None:
                if self._arrival_index < len(self.trace):
                    self.clock.advance_to(self.trace[self._arrival_index].arrival_ms)
                    continue
                break

            materialized = self._materialize(selection)
            if materialized is None:
                # the cache is held by unfinished decodes; run those first
                selection = self.scheduler.get_next_batch(decode_only=True)
                if selection is None:
                    raise CacheCapacityError(
                        "prefill admission refused and no decode work can free memory"
                    )
                materialized = self._materialize(selection)
                if materialized is None:
                    raise CacheCapacityError("decode fallback refused admission")
            seqs, batch = materialized

            if selection.phase is Phase.PREFILL:
                for seq in seqs:
                    self.probes.prefill_start.setdefault(seq.id, self.clock.now)

            start = self.clock.now
            outcome = self.engine.execute(batch, seqs, self._on_report)
            preempted = isinstance(outcome, Preempted)
            self.probes.iterations.append(
                IterationRecord(start, self.clock.now, selection.phase, len(seqs), preempted)
            )
            if preempted:
                self.probes.preemptions += 1
                self.probes.checkpoint_cost_ms += self.engine.cost.checkpoint_cost
                self.scheduler.on_preempted(outcome.checkpoints)
            else:
                for seq in seqs:
                    finished = self.scheduler.route_output(seq, outcome.tokens[seq.id], self.clock.now)
                    if finished:
                        self._release_reservation(seq.id)
                        self.recorder.record(seq)
            if self.clock.now > self.max_virtual_ms:
                raise SimulationError(f"virtual horizon {self.max_virtual_ms} ms exceeded")

        if len(self.scheduler.finished) != len(self.trace):
            raise SimulationError(
                f"run ended with {len(self.scheduler.finished)} finished of {len(self.trace)} admitted"
            )
        self.probes.max_stage_cost_ms = self.engine.max_stage_cost
        self.probes.final_cache_bytes = self.cache.usage_bytes()
        return RunResult(
            scheduler=self.scheduler_name,
            records=list(self.recorder.records),
            makespan_ms=self.clock.now,
            probes=self.probes,
            sequences=dict(self.scheduler.sequences),
        )

    def _check_conservation(self) -> None:
        admitted = len(self.scheduler.sequences)
        accounted = len(self.scheduler.finished) + self.scheduler.queued_count()
        if admitted != accounted:
            raise SimulationError(
                f"job conservation violated: {admitted} admitted vs {accounted} accounted"
            )


def run_simulation(trace: list[TraceRecord], **kwargs) -> RunResult:
    return Simulation(trace, **kwargs).run()
