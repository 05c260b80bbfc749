"""Shared domain types: sequences, batches, checkpoints, priorities, phases,
and the scheduler/engine signal vocabulary.

All types are plain values; every mutation happens inside the single-threaded
simulation loop, so nothing here needs locking.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Reserved token id that terminates generation early.
EOS_TOKEN = 0


class SimulationError(Exception):
    """Base class for runtime errors raised by the simulator."""


class AdmissionError(SimulationError):
    """A sequence was admitted twice or in the wrong phase."""


class CacheCapacityError(SimulationError):
    """KV cache admission refused: configured capacity would be exceeded."""


class StateCorruptionError(SimulationError):
    """Engine state no longer matches cache contents; fail fast."""


class PartialTokenError(SimulationError):
    """A token with pending expert work was used as if fully processed."""


class Priority(enum.IntEnum):
    """Job priority class; total order LATENCY_SENSITIVE > BEST_EFFORT."""

    BEST_EFFORT = 0
    LATENCY_SENSITIVE = 1

    @property
    def tag(self) -> str:
        return "LS" if self is Priority.LATENCY_SENSITIVE else "BE"

    @classmethod
    def from_tag(cls, tag: str) -> "Priority":
        try:
            return {"LS": cls.LATENCY_SENSITIVE, "BE": cls.BEST_EFFORT}[tag]
        except KeyError:
            raise ValueError(f"unknown priority tag {tag!r}") from None


class Phase(enum.Enum):
    """Lifecycle phase of a sequence; transitions only move forward."""

    PREFILL = "prefill"
    DECODE = "decode"
    FINISHED = "finished"


_PHASE_ORDER = {Phase.PREFILL: 0, Phase.DECODE: 1, Phase.FINISHED: 2}


class Stage(enum.IntEnum):
    """Per-layer execution stages, in order; ITERATION_DONE follows the last layer."""

    ATTENTION = 0
    ROUTER = 1
    EXPERTS = 2
    LAYER_DONE = 3
    ITERATION_DONE = 4


class SchedulerDirective(enum.Enum):
    """Answer returned by the scheduler to every engine report."""

    CONTINUE = "continue"
    PREEMPT_AT_NEXT_BOUNDARY = "preempt"


@dataclass
class Checkpoint:
    """Mid-iteration execution snapshot for one sequence.

    ``stage`` is the resume cursor: the next stage to execute.  A checkpoint
    taken right after attention therefore carries stage=ROUTER and no routing
    weights; one taken inside the experts stage carries stage=EXPERTS plus the
    partial expert outputs.
    """

    layer_index: int
    stage: Stage
    hidden_states: list[np.ndarray]
    residuals: list[np.ndarray]
    routing_weights: Optional[list[dict[int, float]]]
    completed_expert_outputs: list[dict[int, np.ndarray]]
    pending_experts: list[set[int]]

    @property
    def position(self) -> tuple[int, Stage]:
        return (self.layer_index, self.stage)

    @property
    def num_tokens(self) -> int:
        return len(self.hidden_states)

    def validate(self) -> None:
        if self.stage not in (Stage.ATTENTION, Stage.ROUTER, Stage.EXPERTS):
            raise StateCorruptionError(f"checkpoint at non-resumable stage {self.stage}")
        n = len(self.hidden_states)
        if not (len(self.residuals) == len(self.completed_expert_outputs) == len(self.pending_experts) == n):
            raise StateCorruptionError("checkpoint token lists have mismatched lengths")
        has_routing = self.routing_weights is not None
        if has_routing != (self.stage > Stage.ROUTER):
            raise StateCorruptionError("routing weights must be present exactly when the router has run")
        if has_routing:
            for i, weights in enumerate(self.routing_weights):
                routed = set(weights)
                done = set(self.completed_expert_outputs[i])
                pending = set(self.pending_experts[i])
                if done | pending != routed or done & pending:
                    raise StateCorruptionError(
                        f"token {i}: completed {sorted(done)} and pending {sorted(pending)} "
                        f"do not partition the routed set {sorted(routed)}"
                    )
        else:
            for i in range(n):
                if self.completed_expert_outputs[i] or self.pending_experts[i]:
                    raise StateCorruptionError(f"token {i}: expert state present before routing")


@dataclass
class Sequence:
    """One inference job and all of its execution metadata."""

    id: int
    priority: Priority
    arrival_time: float
    prompt: list[int]
    max_new_tokens: int
    generated: list[int] = field(default_factory=list)
    phase: Phase = Phase.PREFILL
    cache_handle: Optional[int] = None
    checkpoint: Optional[Checkpoint] = None
    first_token_time: Optional[float] = None
    finish_time: Optional[float] = None

    def advance_phase(self, new_phase: Phase) -> None:
        if _PHASE_ORDER[new_phase] < _PHASE_ORDER[self.phase]:
            raise StateCorruptionError(f"sequence {self.id}: illegal phase move {self.phase} -> {new_phase}")
        self.phase = new_phase

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    def iteration_input(self) -> list[int]:
        """Token ids fed to the model in the sequence's next iteration."""
        if self.phase is Phase.PREFILL:
            return list(self.prompt)
        if self.phase is Phase.DECODE:
            return [self.generated[-1]]
        raise StateCorruptionError(f"sequence {self.id} is finished; nothing to run")

    def tokens_fed(self) -> int:
        """Number of tokens already pushed through the layers (cache entries per layer)."""
        if self.phase is Phase.PREFILL:
            return 0
        return self.prompt_len + max(0, len(self.generated) - 1)


def sequence_new(
    prompt: list[int],
    priority: Priority,
    max_new_tokens: int,
    arrival: float,
    seq_id: int = 0,
) -> Sequence:
    """Construct a fresh sequence in the prefill phase."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    if any(t < 0 for t in prompt):
        raise ValueError("prompt token ids must be non-negative")
    return Sequence(
        id=seq_id,
        priority=priority,
        arrival_time=float(arrival),
        prompt=list(prompt),
        max_new_tokens=int(max_new_tokens),
    )


@dataclass
class Batch:
    """Ordered view over co-scheduled sequences sharing one stage cursor."""

    members: list[int]
    phase: Phase
    layer_cursor: int = 0
    stage_cursor: Stage = Stage.ATTENTION
    batch_id: int = -1

    @property
    def size(self) -> int:
        return len(self.members)


def batch_form(sequences: list[Sequence], phase: Phase, max_batch_size: int, batch_id: int = -1) -> Batch:
    """Validate and build a batch; the cursor comes from a shared checkpoint, if any.

    All members must be in the given phase and stage-aligned: either none is
    checkpointed (fresh batch, cursor at layer 0 / attention) or all carry a
    checkpoint at the same position.
    """
    if not sequences:
        raise ValueError("a batch needs at least one member")
    if len(sequences) > max_batch_size:
        raise ValueError(f"batch of {len(sequences)} exceeds maximum size {max_batch_size}")
    for seq in sequences:
        if seq.phase is not phase:
            raise ValueError(f"sequence {seq.id} is in phase {seq.phase.value}, expected {phase.value}")
    positions = {(seq.checkpoint.position if seq.checkpoint is not None else None) for seq in sequences}
    if len(positions) > 1:
        raise ValueError(f"members are not stage-aligned: {sorted(positions, key=str)}")
    position = positions.pop()
    if position is None:
        layer, stage = 0, Stage.ATTENTION
    else:
        layer, stage = position
    return Batch(
        members=[seq.id for seq in sequences],
        phase=phase,
        layer_cursor=layer,
        stage_cursor=stage,
        batch_id=batch_id,
    )


@dataclass(frozen=True)
class MemberProgress:
    """Per-sequence summary carried on every engine report."""

    seq_id: int
    priority: Priority
    phase: Phase
    generated_count: int


@dataclass(frozen=True)
class EngineReport:
    """Status message emitted by the engine after each completed stage."""

    batch_id: int
    stage: Stage
    layer_index: int
    timestamp: float
    progress: tuple[MemberProgress, ...]
    expert_id: Optional[int] = None

    def contains_priority(self, priority: Priority) -> bool:
        return any(p.priority is priority for p in self.progress)
