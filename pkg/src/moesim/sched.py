"""Priority-aware preemptive scheduler: dispatcher over four FCFS queues, the
batch-selection logic, the preemption trigger evaluated at every engine
report, and the pluggable policy interface.

Preempted sequences re-enter their queue class as *resume groups* that stay
co-scheduled (they share a checkpoint position) until their interrupted
iteration completes.  Groups precede fresh best-effort work of the same class;
in the latency-sensitive prefill queue, fresh arrivals precede groups so that
a new LS job's prefill always starts within one stage boundary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    AdmissionError,
    Checkpoint,
    EngineReport,
    EOS_TOKEN,
    Phase,
    Priority,
    SchedulerDirective,
    Sequence,
    Stage,
)
from .model import UnifiedDynamicCache


@dataclass(frozen=True)
class QueueView:
    """Immutable snapshot of one queue class."""

    fresh: tuple[int, ...]
    resume: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.fresh) + len(self.resume)


@dataclass(frozen=True)
class QueueSnapshot:
    """Immutable view over the four queues, handed to policies."""

    ls_prefill: QueueView
    be_prefill: QueueView
    ls_decode: QueueView
    be_decode: QueueView


Policy = Callable[[EngineReport, QueueSnapshot], SchedulerDirective]


def qllm_policy(report: EngineReport, queues: QueueSnapshot) -> SchedulerDirective:
    """Default preemption rule.

    Preempt when a fresh LS prefill is waiting (its first stage must start
    within one boundary), or when any LS work waits while the running batch
    holds no LS member.  A batch that already contains LS work is never
    preempted on behalf of waiting LS decodes: they gain nothing from it.
    """
    if queues.ls_prefill.fresh:
        return SchedulerDirective.PREEMPT_AT_NEXT_BOUNDARY
    ls_waiting = queues.ls_prefill.size > 0 or queues.ls_decode.size > 0
    if ls_waiting and not report.contains_priority(Priority.LATENCY_SENSITIVE):
        return SchedulerDirective.PREEMPT_AT_NEXT_BOUNDARY
    return SchedulerDirective.CONTINUE


def never_preempt_policy(report: EngineReport, queues: QueueSnapshot) -> SchedulerDirective:
    return SchedulerDirective.CONTINUE


POLICIES: dict[str, Policy] = {
    "qllm": qllm_policy,
    "never-preempt": never_preempt_policy,
}


@dataclass
class BatchSelection:
    """Outcome of one batch-selection call."""

    seq_ids: list[int]
    phase: Phase
    resume: bool = False


class _ClassQueue:
    """One queue class: FIFO of fresh ids plus FIFO of resume groups."""

    def __init__(self, fresh_first: bool):
        self.fresh: deque[int] = deque()
        self.groups: deque[list[int]] = deque()
        self.fresh_first = fresh_first

    @property
    def size(self) -> int:
        return len(self.fresh) + sum(len(g) for g in self.groups)

    def head_is_group(self) -> bool:
        if not self.groups:
            return False
        if self.fresh_first and self.fresh:
            return False
        return True

    def view(self) -> QueueView:
        return QueueView(
            fresh=tuple(self.fresh),
            resume=tuple(sid for group in self.groups for sid in group),
        )


class QllmScheduler:
    """Dispatcher plus batch engine implementing the priority batch-selection logic."""

    def __init__(self, cache: UnifiedDynamicCache, max_batch_size: int = 32, policy: Policy = qllm_policy):
        self.cache = cache
        self.max_batch_size = max_batch_size
        self.policy = policy
        self.sequences: dict[int, Sequence] = {}
        self.finished: set[int] = set()
        self._queues = {
            (Priority.LATENCY_SENSITIVE, Phase.PREFILL): _ClassQueue(fresh_first=True),
            (Priority.BEST_EFFORT, Phase.PREFILL): _ClassQueue(fresh_first=False),
            (Priority.LATENCY_SENSITIVE, Phase.DECODE): _ClassQueue(fresh_first=False),
            (Priority.BEST_EFFORT, Phase.DECODE): _ClassQueue(fresh_first=False),
        }

    # -- queue access -------------------------------------------------

    @property
    def ls_prefill(self) -> _ClassQueue:
        return self._queues[(Priority.LATENCY_SENSITIVE, Phase.PREFILL)]

    @property
    def be_prefill(self) -> _ClassQueue:
        return self._queues[(Priority.BEST_EFFORT, Phase.PREFILL)]

    @property
    def ls_decode(self) -> _ClassQueue:
        return self._queues[(Priority.LATENCY_SENSITIVE, Phase.DECODE)]

    @property
    def be_decode(self) -> _ClassQueue:
        return self._queues[(Priority.BEST_EFFORT, Phase.DECODE)]

    def snapshot(self) -> QueueSnapshot:
        return QueueSnapshot(
            ls_prefill=self.ls_prefill.view(),
            be_prefill=self.be_prefill.view(),
            ls_decode=self.ls_decode.view(),
            be_decode=self.be_decode.view(),
        )

    def queued_count(self) -> int:
        return sum(q.size for q in self._queues.values())

    # -- dispatcher ----------------------------------------------------

    def dispatch_arrival(self, seq: Sequence) -> None:
        if seq.id in self.sequences:
            raise AdmissionError(f"sequence {seq.id} admitted twice")
        if seq.phase is not Phase.PREFILL:
            raise AdmissionError(f"sequence {seq.id} must arrive in the prefill phase")
        self.sequences[seq.id] = seq
        self._queues[(seq.priority, Phase.PREFILL)].fresh.append(seq.id)

    def route_output(self, seq: Sequence, token: int, now: float) -> bool:
        """Apply one emitted token; returns True when the sequence finished."""
        if len(seq.generated) >= seq.max_new_tokens:
            raise AdmissionError(f"sequence {seq.id} already produced max_new_tokens")
        seq.generated.append(token)
        if seq.first_token_time is None:
            seq.first_token_time = now
        if len(seq.generated) == seq.max_new_tokens or token == EOS_TOKEN:
            seq.advance_phase(Phase.FINISHED)
            seq.finish_time = now
            self.finished.add(seq.id)
            self.cache.evict_sequence(seq.cache_handle)
            return True
        seq.advance_phase(Phase.DECODE)
        self._queues[(seq.priority, Phase.DECODE)].fresh.append(seq.id)
        return False

    def on_engine_report(self, report: EngineReport) -> SchedulerDirective:
        return self.policy(report, self.snapshot())

    def on_preempted(self, checkpoints: dict[int, Checkpoint]) -> None:
        """Re-enqueue a preempted batch as per-class resume groups.

        A prefill checkpoint taken before any work at all (layer 0, attention)
        carries nothing worth restoring: it is discarded and the sequence
        rejoins the head of the fresh queue.
        """
        if not checkpoints:
            return
        groups: dict[tuple[Priority, Phase], list[int]] = {}
        discarded: dict[tuple[Priority, Phase], list[int]] = {}
        for seq_id, ckpt in checkpoints.items():
            seq = self.sequences[seq_id]
            key = (seq.priority, seq.phase)
            if ckpt.layer_index == 0 and ckpt.stage is Stage.ATTENTION:
                seq.checkpoint = None
                discarded.setdefault(key, []).append(seq_id)
            else:
                groups.setdefault(key, []).append(seq_id)
        for key, ids in groups.items():
            self._queues[key].groups.append(ids)
        for key, ids in discarded.items():
            for sid in reversed(ids):
                self._queues[key].fresh.appendleft(sid)

    def requeue_front(self, seq_ids: list[int]) -> None:
        """Return not-yet-run members to the front of their fresh queue (capacity trims)."""
        for sid in reversed(seq_ids):
            seq = self.sequences[sid]
            self._queues[(seq.priority, seq.phase)].fresh.appendleft(sid)

    # -- batch engine (the published selection logic) -------------------

    def get_next_batch(self, decode_only: bool = False) -> Optional[BatchSelection]:
        """Priority batch selection.

        1. A full LS decode queue yields a full LS decode batch.
        2. Otherwise waiting LS prefills run, topped up with BE prefills.
        3. Otherwise waiting LS decodes run, topped up with BE decodes.
        4. Otherwise BE decodes run;  5. otherwise BE prefills;  6. idle.

        Resume groups are indivisible and sit at the head of their own class:
        its GetBatch always returns the group first.  A group is topped up
        only with the matching-position group of the other priority (the two
        halves of one preempted batch), never with fresh work.  Fill-from-BE
        may pass a stage-incompatible BE group: blocking fills until the group
        resumes would run every mixed batch far below capacity and starve
        throughput instead.

        Suspended iterations come right after the LS prefill branch: a resume
        group is in-flight engine state, not fresh work, and completing it
        keeps its members (and the cache they hold) moving; parking it until
        its own branch fires would freeze a batch worth of jobs whenever LS
        work stays queued.

        ``decode_only`` skips the prefill branches; the driver uses it when
        cache admission refused a prefill batch and decode work must run first
        to free memory.
        """
        max_size = self.max_batch_size
        if self.ls_decode.size >= max_size:
            return self._take(self.ls_decode, Phase.DECODE, fill_from=None)
        if not decode_only and self.ls_prefill.size > 0:
            return self._take(self.ls_prefill, Phase.PREFILL, fill_from=self.be_prefill)
        resumed = self._take_resume_group(decode_only)
        if resumed is not None:
            return resumed
        if self.ls_decode.size > 0:
            return self._take(self.ls_decode, Phase.DECODE, fill_from=self.be_decode)
        if self.be_decode.size > 0:
            return self._take(self.be_decode, Phase.DECODE, fill_from=None)
        if not decode_only and self.be_prefill.size > 0:
            return self._take(self.be_prefill, Phase.PREFILL, fill_from=None)
        return None

    def _take_resume_group(self, decode_only: bool) -> Optional[BatchSelection]:
        """Pop the next suspended iteration: LS decode groups first, then BE
        decode groups (merging the matching half of a split batch), then BE
        prefill groups unless decode_only."""
        for queue, partner, phase in (
            (self.ls_decode, self.be_decode, Phase.DECODE),
            (self.be_decode, self.ls_decode, Phase.DECODE),
            (self.be_prefill, None, Phase.PREFILL),
        ):
            if phase is Phase.PREFILL and decode_only:
                continue
            if not queue.groups:
                continue
            members = list(queue.groups.popleft())
            if partner is not None and partner.groups:
                position = self.sequences[members[0]].checkpoint.position
                candidate = partner.groups[0]
                if (
                    self.sequences[candidate[0]].checkpoint.position == position
                    and len(members) + len(candidate) <= self.max_batch_size
                ):
                    members.extend(partner.groups.popleft())
            members.sort()  # stable co-batch order: admission ids
            return BatchSelection(seq_ids=members, phase=phase, resume=True)
        return None

    def _take(self, queue: _ClassQueue, phase: Phase, fill_from: Optional[_ClassQueue]) -> BatchSelection:
        max_size = self.max_batch_size
        if queue.head_is_group():
            members = list(queue.groups.popleft())
            if fill_from is not None and fill_from.head_is_group():
                position = self.sequences[members[0]].checkpoint.position
                partner = fill_from.groups[0]
                partner_pos = self.sequences[partner[0]].checkpoint.position
                if partner_pos == position and len(members) + len(partner) <= max_size:
                    members.extend(fill_from.groups.popleft())
            return BatchSelection(seq_ids=members, phase=phase, resume=True)
        members = []
        while queue.fresh and len(members) < max_size:
            members.append(queue.fresh.popleft())
        if fill_from is not None:
            while fill_from.fresh and len(members) < max_size:
                members.append(fill_from.fresh.popleft())
        return BatchSelection(seq_ids=members, phase=phase, resume=False)


class BaselineScheduler:
    """Priority-oblivious iteration-level FCFS continuous batching.

    One pending FIFO (arrival order, priorities ignored) and one running
    decode batch.  At iteration boundaries finished members leave; if slots
    are free, pending arrivals are prefilled FCFS and merged.  Execution is
    never redirected mid-iteration.
    """

    def __init__(self, cache: UnifiedDynamicCache, max_batch_size: int = 32):
        self.cache = cache
        self.max_batch_size = max_batch_size
        self.sequences: dict[int, Sequence] = {}
        self.pending: deque[int] = deque()
        self.slots: list[int] = []
        self.finished: set[int] = set()

    def dispatch_arrival(self, seq: Sequence) -> None:
        if seq.id in self.sequences:
            raise AdmissionError(f"sequence {seq.id} admitted twice")
        if seq.phase is not Phase.PREFILL:
            raise AdmissionError(f"sequence {seq.id} must arrive in the prefill phase")
        self.sequences[seq.id] = seq
        self.pending.append(seq.id)

    def route_output(self, seq: Sequence, token: int, now: float) -> bool:
        if len(seq.generated) >= seq.max_new_tokens:
            raise AdmissionError(f"sequence {seq.id} already produced max_new_tokens")
        seq.generated.append(token)
        if seq.first_token_time is None:
            seq.first_token_time = now
        if len(seq.generated) == seq.max_new_tokens or token == EOS_TOKEN:
            seq.advance_phase(Phase.FINISHED)
            seq.finish_time = now
            self.finished.add(seq.id)
            if seq.id in self.slots:
                self.slots.remove(seq.id)
            self.cache.evict_sequence(seq.cache_handle)
            return True
        seq.advance_phase(Phase.DECODE)
        if seq.id not in self.slots:
            self.slots.append(seq.id)
        return False

    def on_engine_report(self, report: EngineReport) -> SchedulerDirective:
        return SchedulerDirective.CONTINUE

    def on_preempted(self, checkpoints: dict[int, Checkpoint]) -> None:
        raise AdmissionError("the baseline never preempts; no checkpoints expected")

    def requeue_front(self, seq_ids: list[int]) -> None:
        for sid in reversed(seq_ids):
            seq = self.sequences[sid]
            if seq.phase is Phase.PREFILL:
                self.pending.appendleft(sid)
            elif sid not in self.slots:
                self.slots.insert(0, sid)

    def queued_count(self) -> int:
        return len(self.pending) + len(self.slots)

    def get_next_batch(self, decode_only: bool = False) -> Optional[BatchSelection]:
        free = self.max_batch_size - len(self.slots)
        if not decode_only and self.pending and free > 0:
            members = [self.pending.popleft() for _ in range(min(free, len(self.pending)))]
            return BatchSelection(seq_ids=members, phase=Phase.PREFILL, resume=False)
        if self.slots:
            return BatchSelection(seq_ids=list(self.slots), phase=Phase.DECODE, resume=False)
        return None
