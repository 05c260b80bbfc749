"""Inference engine: drives batches through layers and stages on a virtual
clock, reports to the scheduler after the attention and router stages and
after each expert's drain, honors preemption directives at stage boundaries,
and checkpoints/restores batch state bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import (
    Batch,
    Checkpoint,
    EngineReport,
    MemberProgress,
    PartialTokenError,
    Phase,
    SchedulerDirective,
    Sequence,
    SimulationError,
    Stage,
    StateCorruptionError,
    batch_form,
)
from .model import ExpertQueueEntry, ExpertQueues, MoEModel, UnifiedDynamicCache, attend, normalize


class VirtualClock:
    """Monotone virtual time in milliseconds; never reads wall time."""

    def __init__(self, start: float = 0.0):
        self.now = float(start)

    def advance(self, delta_ms: float) -> None:
        if delta_ms < 0:
            raise SimulationError(f"clock cannot move backwards (delta {delta_ms})")
        self.now += delta_ms

    def advance_to(self, timestamp: float) -> None:
        if timestamp < self.now:
            raise SimulationError(f"clock cannot jump back to {timestamp} from {self.now}")
        self.now = timestamp


@dataclass(frozen=True)
class CostModel:
    """Linear virtual-time charges per stage, in milliseconds.

    Defaults are calibrated so that one decode iteration of a 32-member batch
    over 32 layers (each member holding a 180-token context) lands inside the
    300-400 ms window; see ``calibration_iteration_ms`` in the cli module.
    """

    attn_base: float = 1.2
    attn_per_token: float = 0.001
    attn_per_cached: float = 0.0003
    router_cost: float = 0.8
    expert_base: float = 0.85
    expert_per_entry: float = 0.0005
    checkpoint_cost: float = 2.0
    restore_cost: float = 2.0

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"cost parameter {name} must be >= 0, got {value}")

    def attention_cost(self, tokens: int, cached_entries: int) -> float:
        return self.attn_base + self.attn_per_token * tokens + self.attn_per_cached * cached_entries

    def expert_cost(self, entries: int) -> float:
        return self.expert_base + self.expert_per_entry * entries

    def stage_cost(self, stage: Stage, *, tokens: int = 0, cached_entries: int = 0, expert_entries: int = 0) -> float:
        """Charge for one stage; an empty expert drain costs nothing at all."""
        if stage is Stage.ATTENTION:
            return self.attention_cost(tokens, cached_entries)
        if stage is Stage.ROUTER:
            return self.router_cost
        if stage is Stage.EXPERTS:
            return 0.0 if expert_entries == 0 else self.expert_cost(expert_entries)
        return 0.0

    def scaled(self, factor: float) -> "CostModel":
        return CostModel(**{name: value * factor for name, value in self.__dict__.items()})


@dataclass
class Completed:
    """Iteration finished; one new token per member, keyed by sequence id."""

    tokens: dict[int, int]


@dataclass
class Preempted:
    """Iteration halted at a stage boundary; per-member checkpoints."""

    checkpoints: dict[int, Checkpoint]


IterationOutcome = Union[Completed, Preempted]
ReportCallback = Callable[[EngineReport], SchedulerDirective]


@dataclass
class _MemberState:
    """In-flight execution state of one batch member; ``hidden`` is (tokens, d)."""

    seq: Sequence
    tokens: list[int]
    hidden: np.ndarray
    residuals: Optional[np.ndarray] = None
    routing: Optional[list[dict[int, float]]] = None
    completed: Optional[list[dict[int, np.ndarray]]] = None
    pending: Optional[list[set[int]]] = None

    @property
    def num_tokens(self) -> int:
        return self.hidden.shape[0]


class InferenceEngine:
    """Single-threaded engine owning the model, cache, and expert queues."""

    def __init__(
        self,
        model: MoEModel,
        cache: UnifiedDynamicCache,
        clock: VirtualClock,
        cost_model: CostModel,
        max_batch_size: int = 32,
    ):
        cost_model.validate()
        self.model = model
        self.cache = cache
        self.clock = clock
        self.cost = cost_model
        self.max_batch_size = max_batch_size
        self.queues = ExpertQueues(model.config.num_experts, model.config.num_layers)
        self.max_stage_cost = 0.0
        self._batch_counter = 0

    def next_batch_id(self) -> int:
        self._batch_counter += 1
        return self._batch_counter

    def restore(self, sequences: list[Sequence]) -> Batch:
        """Rebuild a batch from checkpoints sharing one position; charges restore cost per member."""
        if not sequences:
            raise ValueError("nothing to restore")
        positions = set()
        for seq in sequences:
            if seq.checkpoint is None:
                raise ValueError(f"sequence {seq.id} has no checkpoint to restore")
            positions.add(seq.checkpoint.position)
        if len(positions) != 1:
            raise ValueError(f"checkpoints at mixed positions {sorted(positions)}; group them first")
        batch = batch_form(sequences, sequences[0].phase, self.max_batch_size, self.next_batch_id())
        self.clock.advance(self.cost.restore_cost * len(sequences))
        return batch

    def execute(self, batch: Batch, sequences: list[Sequence], on_report: ReportCallback) -> IterationOutcome:
        """Run one iteration from the batch cursor to IterationDone or a preemption boundary.

        The callback is invoked after attention, after the router, and after
        each individual expert's drain; a PREEMPT_AT_NEXT_BOUNDARY answer halts
        execution right there and checkpoints every member.
        """
        if [seq.id for seq in sequences] != batch.members:
            raise SimulationError("sequence list does not match batch members")
        states = [self._init_state(seq) for seq in sequences]
        num_layers = self.model.config.num_layers
        tokens_total = sum(st.num_tokens for st in states)

        layer = batch.layer_cursor
        stage = batch.stage_cursor
        if stage not in (Stage.ATTENTION, Stage.ROUTER, Stage.EXPERTS):
            raise SimulationError(f"batch cursor at non-executable stage {stage}")

        while layer < num_layers:
            if stage is Stage.ATTENTION:
                self._attention_stage(states, layer)
                scanned = sum(self.cache.count(st.seq.cache_handle, layer) for st in states)
                self._charge(self.cost.attention_cost(tokens_total, scanned))
                directive = on_report(self._report(batch, Stage.ATTENTION, layer, states))
                if directive is SchedulerDirective.PREEMPT_AT_NEXT_BOUNDARY:
                    return self._preempt(states, layer, Stage.ROUTER)
                stage = Stage.ROUTER

            if stage is Stage.ROUTER:
                self._router_stage(states, layer)
                self._charge(self.cost.router_cost)
                directive = on_report(self._report(batch, Stage.ROUTER, layer, states))
                if directive is SchedulerDirective.PREEMPT_AT_NEXT_BOUNDARY:
                    return self._preempt(states, layer, Stage.EXPERTS)
                stage = Stage.EXPERTS

            # Experts stage: queue pending work, then drain expert by expert.
            self._enqueue_expert_work(states, layer)
            by_seq = {st.seq.id: st for st in states}
            for expert_id in self.queues.pending_experts(layer):
                entries = self.queues.drain(expert_id, layer)
                inputs = np.empty((len(entries), self.model.config.hidden_dim))
                for row, entry in enumerate(entries):
                    inputs[row] = by_seq[entry.seq_id].hidden[entry.token_index]
                outputs = self.model.expert_forward_many(expert_id, layer, inputs)
                for row, entry in enumerate(entries):
                    st = by_seq[entry.seq_id]
                    st.completed[entry.token_index][expert_id] = outputs[row]
                    st.pending[entry.token_index].discard(expert_id)
                self._charge(self.cost.expert_cost(len(entries)))
                directive = on_report(self._report(batch, Stage.EXPERTS, layer, states, expert_id=expert_id))
                if directive is SchedulerDirective.PREEMPT_AT_NEXT_BOUNDARY:
                    self.queues.clear_layer(layer)
                    return self._preempt(states, layer, Stage.EXPERTS)

            self._finish_layer(states, layer)
            layer += 1
            stage = Stage.ATTENTION

        tokens = {st.seq.id: self.model.emit_token(st.hidden[-1]) for st in states}
        return Completed(tokens)

    # ------------------------------------------------------------------
    # stage implementations

    def _init_state(self, seq: Sequence) -> _MemberState:
        if seq.cache_handle is None or not self.cache.has_handle(seq.cache_handle):
            raise StateCorruptionError(f"sequence {seq.id} has no registered cache handle")
        tokens = seq.iteration_input()
        ckpt = seq.checkpoint
        if ckpt is None:
            hidden = self.model.embedding[np.asarray(tokens)]
            return _MemberState(seq=seq, tokens=tokens, hidden=hidden)
        if ckpt.num_tokens != len(tokens):
            raise StateCorruptionError(f"sequence {seq.id}: checkpoint does not match iteration input")
        seq.checkpoint = None  # resumed; checkpoints live only while preempted
        return _MemberState(
            seq=seq,
            tokens=tokens,
            hidden=np.stack(ckpt.hidden_states),
            residuals=np.stack(ckpt.residuals),
            routing=list(ckpt.routing_weights) if ckpt.routing_weights is not None else None,
            completed=[dict(d) for d in ckpt.completed_expert_outputs],
            pending=[set(s) for s in ckpt.pending_experts],
        )

    def _attention_stage(self, states: list[_MemberState], layer: int) -> None:
        for st in states:
            seq = st.seq
            handle = seq.cache_handle
            have = self.cache.count(handle, layer)
            if seq.phase is Phase.DECODE:
                expected = seq.tokens_fed()
                if have != expected:
                    raise StateCorruptionError(
                        f"sequence {seq.id} layer {layer}: {have} cached entries, expected {expected}"
                    )
                h = st.hidden[0]
                key, value = self.model.kv_project(h, layer)
                self.cache.append(handle, layer, key, value)
                keys, values = self.cache.entries(handle, layer)
                st.hidden = attend(h, keys, values)[None, :]
            else:
                if have != 0:
                    raise StateCorruptionError(
                        f"sequence {seq.id} layer {layer}: prefill expects an empty layer, found {have} entries"
                    )
                st.hidden = self._prefill_attention(st, layer)
            st.residuals = st.hidden.copy()

    def _prefill_attention(self, st: _MemberState, layer: int) -> np.ndarray:
        """Causal attention over the whole prompt, bit-identical to processing
        tokens one at a time.

        The O(p^2) score/exp work is batched (each element is an independent
        contraction over the fixed hidden dimension, so batching cannot change
        its rounding), but each token's reductions over its prefix run on the
        exact prefix slice: reduction grouping depends on operand length, so
        padded rows would round differently.
        """
        handle = st.seq.cache_handle
        h_mat = st.hidden
        keys = np.einsum("ij,tj->ti", self.model.w_key[layer], h_mat)
        values = np.einsum("ij,tj->ti", self.model.w_value[layer], h_mat)
        self.cache.append_many(handle, layer, keys, values)
        scores = np.einsum("sd,td->ts", keys, h_mat)
        allowed = np.tril(np.ones(scores.shape, dtype=bool))
        masked = np.where(allowed, scores, -np.inf)
        stable = np.exp(masked - masked.max(axis=1)[:, None])
        out = np.empty_like(h_mat)
        for i in range(h_mat.shape[0]):
            row = stable[i, : i + 1]
            weights = row / np.einsum("n->", row)
            mix = np.einsum("n,nd->d", weights, values[: i + 1])
            out[i] = normalize(h_mat[i] + mix)
        return out

    def _router_stage(self, states: list[_MemberState], layer: int) -> None:
        for st in states:
            if st.num_tokens == 1:
                st.routing = [self.model.route(st.hidden[0], layer)]
            else:
                st.routing = self.model.route_many(st.hidden, layer)
            st.completed = [{} for _ in range(st.num_tokens)]
            st.pending = [set(r) for r in st.routing]

    def _enqueue_expert_work(self, states: list[_MemberState], layer: int) -> int:
        count = 0
        for st in states:
            for token_index, pending in enumerate(st.pending):
                weights = st.routing[token_index]
                for expert_id in sorted(pending):
                    self.queues.enqueue(
                        ExpertQueueEntry(
                            seq_id=st.seq.id,
                            token_index=token_index,
                            layer=layer,
                            expert_id=expert_id,
                            weight=weights[expert_id],
                        )
                    )
                    count += 1
        return count

    def _finish_layer(self, states: list[_MemberState], layer: int) -> None:
        """Combine expert outputs into next-layer hidden states.

        Vectorized across tokens but with the same accumulation order as the
        per-token combine: residual, then weighted outputs in ascending
        expert id order.
        """
        k = self.model.config.top_k
        dim = self.model.config.hidden_dim
        for st in states:
            n = st.num_tokens
            weights = np.empty((n, k))
            outputs = np.empty((n, k, dim))
            for i in range(n):
                if st.pending[i]:
                    raise PartialTokenError(
                        f"sequence {st.seq.id} token {i} reached the layer boundary "
                        f"with pending experts {sorted(st.pending[i])}"
                    )
                routing = st.routing[i]
                done = st.completed[i]
                if len(done) != k or set(done) != set(routing):
                    raise StateCorruptionError(
                        f"sequence {st.seq.id} token {i}: expert outputs do not match the routed set"
                    )
                for j, eid in enumerate(sorted(done)):
                    weights[i, j] = routing[eid]
                    outputs[i, j] = done[eid]
            acc = st.residuals.copy()
            for j in range(k):
                acc = acc + weights[:, j][:, None] * outputs[:, j]
            st.hidden = acc
            st.residuals = None
            st.routing = None
            st.completed = None
            st.pending = None

    # ------------------------------------------------------------------
    # bookkeeping

    def _charge(self, cost_ms: float) -> None:
        self.clock.advance(cost_ms)
        if cost_ms > self.max_stage_cost:
            self.max_stage_cost = cost_ms

    def _report(
        self,
        batch: Batch,
        stage: Stage,
        layer: int,
        states: list[_MemberState],
        expert_id: Optional[int] = None,
    ) -> EngineReport:
        progress = tuple(
            MemberProgress(
                seq_id=st.seq.id,
                priority=st.seq.priority,
                phase=st.seq.phase,
                generated_count=len(st.seq.generated),
            )
            for st in states
        )
        return EngineReport(
            batch_id=batch.batch_id,
            stage=stage,
            layer_index=layer,
            timestamp=self.clock.now,
            progress=progress,
            expert_id=expert_id,
        )

    def _preempt(self, states: list[_MemberState], layer: int, resume_stage: Stage) -> Preempted:
        checkpoints: dict[int, Checkpoint] = {}
        for st in states:
            past_router = resume_stage > Stage.ROUTER
            n = st.num_tokens
            ckpt = Checkpoint(
                layer_index=layer,
                stage=resume_stage,
                hidden_states=[st.hidden[i].copy() for i in range(n)],
                residuals=[st.residuals[i].copy() for i in range(n)],
                routing_weights=list(st.routing) if past_router else None,
                completed_expert_outputs=(
                    [dict(d) for d in st.completed] if past_router else [{} for _ in range(n)]
                ),
                pending_experts=(
                    [set(s) for s in st.pending] if past_router else [set() for _ in range(n)]
                ),
            )
            ckpt.validate()
            st.seq.checkpoint = ckpt
            checkpoints[st.seq.id] = ckpt
        self._charge(self.cost.checkpoint_cost)
        return Preempted(checkpoints)
