"""Deterministic toy MoE compute core.

Small dense vectors, seeded parameters, softmax attention over a per-sequence
KV cache, top-k routing, affine tanh experts, per-(expert, layer) FIFO work
queues, and the byte-accounted unified KV cache.

Every reduction is computed with ``np.einsum`` (sequential accumulation, no
BLAS dispatch) and a fixed iteration order, so the prompt -> token mapping is
bit-identical across runs and across any preemption pattern.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .core import CacheCapacityError, SimulationError, StateCorruptionError

NORM_EPS = 1e-9

# Downward bias on the reserved end-of-sequence logit (token id 0).  Without
# it, a random output projection frequently makes token 0 the argmax for the
# hidden-state attractor, collapsing every output to one or two tokens; with
# it, early termination still occurs for some parameter draws but no longer
# dominates, so output lengths track the workload's length distribution.
EOS_LOGIT_PENALTY = 0.5


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of the toy model; same seed means bit-identical parameters."""

    num_layers: int = 8
    hidden_dim: int = 16
    num_experts: int = 8
    top_k: int = 2
    vocab_size: int = 256
    seed: int = 0

    def validate(self) -> None:
        if not (1 <= self.num_layers <= 32):
            raise ValueError("num_layers must be in [1, 32]")
        if min(self.hidden_dim, self.num_experts, self.vocab_size) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError("top_k must satisfy 1 <= k <= num_experts")


def normalize(v: np.ndarray) -> np.ndarray:
    """Divide by the Euclidean norm plus a small epsilon."""
    return v / (math.sqrt(float(np.einsum("i,i->", v, v))) + NORM_EPS)


def attend(h: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Softmax attention of one query over its cached entries.

    output = normalize(h + sum_i softmax(dot(h, K_i)) * V_i), accumulated in
    ascending entry order.
    """
    scores = np.einsum("nd,d->n", keys, h)
    stable = np.exp(scores - scores.max())
    weights = stable / np.einsum("n->", stable)
    mix = np.einsum("n,nd->d", weights, values)
    return normalize(h + mix)


def select_top_k(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores; ties broken toward the lower index."""
    values = scores.tolist()
    order = sorted(range(len(values)), key=lambda e: (-values[e], e))
    return sorted(order[:k])


def softmax_over(scores: np.ndarray) -> np.ndarray:
    stable = np.exp(scores - scores.max())
    return stable / np.einsum("n->", stable)


class MoEModel:
    """Seeded parameters plus the per-stage math, all pure per-token functions."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        d, e, v, layers = config.hidden_dim, config.num_experts, config.vocab_size, config.num_layers
        rng = np.random.default_rng(config.seed)
        scale = 1.0 / math.sqrt(d)
        self.embedding = rng.standard_normal((v, d))
        self.w_key = [rng.standard_normal((d, d)) * scale for _ in range(layers)]
        self.w_value = [rng.standard_normal((d, d)) * scale for _ in range(layers)]
        # stacked K/V projection: one matvec yields both, rows unchanged
        self.w_kv = [np.concatenate([self.w_key[l], self.w_value[l]]) for l in range(layers)]
        self.w_router = [rng.standard_normal((e, d)) * scale for _ in range(layers)]
        self.expert_weight = [rng.standard_normal((e, d, d)) * scale for _ in range(layers)]
        self.expert_bias = [rng.standard_normal((e, d)) * scale for _ in range(layers)]
        self.w_out = rng.standard_normal((v, d)) * scale
        self.b_out = rng.standard_normal(v) * scale
        self.b_out[0] -= EOS_LOGIT_PENALTY

    def embed(self, token: int) -> np.ndarray:
        return self.embedding[token]

    def kv_project(self, h: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray]:
        d = self.config.hidden_dim
        kv = np.einsum("ij,j->i", self.w_kv[layer], h)
        return kv[:d], kv[d:]

    def router_scores(self, h: np.ndarray, layer: int) -> np.ndarray:
        return np.einsum("ed,d->e", self.w_router[layer], h)

    def route(self, h: np.ndarray, layer: int) -> dict[int, float]:
        """Top-k expert ids with softmax-normalized weights, keyed in ascending id order."""
        scores = self.router_scores(h, layer)
        chosen = select_top_k(scores, self.config.top_k)
        weights = softmax_over(scores[chosen])
        return {eid: float(w) for eid, w in zip(chosen, weights)}

    def route_many(self, hiddens: np.ndarray, layer: int) -> list[dict[int, float]]:
        """Row-wise ``route``; bit-identical to routing each hidden state alone."""
        k = self.config.top_k
        scores = np.einsum("ed,td->te", self.w_router[layer], hiddens)
        order = np.argsort(-scores, axis=1, kind="stable")
        chosen = np.sort(order[:, :k], axis=1)
        picked = np.take_along_axis(scores, chosen, axis=1)
        stable = np.exp(picked - picked.max(axis=1)[:, None])
        weights = stable / np.einsum("tk->t", stable)[:, None]
        return [
            {int(chosen[t, j]): float(weights[t, j]) for j in range(k)}
            for t in range(hiddens.shape[0])
        ]

    def expert_forward(self, expert_id: int, layer: int, h: np.ndarray) -> np.ndarray:
        a = self.expert_weight[layer][expert_id]
        b = self.expert_bias[layer][expert_id]
        return np.tanh(np.einsum("ij,j->i", a, h) + b)

    def expert_forward_many(self, expert_id: int, layer: int, hiddens: np.ndarray) -> np.ndarray:
        """Row-wise ``expert_forward``; bit-identical to per-row evaluation."""
        a = self.expert_weight[layer][expert_id]
        b = self.expert_bias[layer][expert_id]
        return np.tanh(np.einsum("ij,tj->ti", a, hiddens) + b)

    def combine(
        self,
        residual: np.ndarray,
        routing: dict[int, float],
        outputs: dict[int, np.ndarray],
        pending: set[int],
    ) -> np.ndarray:
        """residual + sum of weighted expert outputs, summed in ascending expert id order."""
        from .core import PartialTokenError

        if pending:
            raise PartialTokenError(f"cannot combine token with pending experts {sorted(pending)}")
        if set(outputs) != set(routing):
            raise StateCorruptionError("expert outputs do not match the routed set")
        h = residual.copy()
        for eid in sorted(outputs):
            h = h + routing[eid] * outputs[eid]
        return h

    def emit_token(self, h: np.ndarray) -> int:
        """argmax over the vocabulary of the output projection; ties go to the lowest id."""
        logits = np.einsum("vd,d->v", self.w_out, h) + self.b_out
        return int(np.argmax(logits))


class ExpertQueueEntry(NamedTuple):
    """One (sequence, token, expert) work item awaiting an expert's drain."""

    seq_id: int
    token_index: int
    layer: int
    expert_id: int
    weight: float

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.seq_id, self.token_index, self.layer, self.expert_id)


class ExpertQueues:
    """Global FIFO queues keyed by (expert id, layer index)."""

    def __init__(self, num_experts: int, num_layers: int):
        self.num_experts = num_experts
        self.num_layers = num_layers
        self._queues: dict[tuple[int, int], deque[ExpertQueueEntry]] = {}
        self._live_keys: set[tuple[int, int, int, int]] = set()

    def enqueue(self, entry: ExpertQueueEntry) -> None:
        key = entry[:4]  # (seq_id, token_index, layer, expert_id)
        if key in self._live_keys:
            raise SimulationError(f"duplicate expert work item {key}")
        self._live_keys.add(key)
        self._queues.setdefault((entry.expert_id, entry.layer), deque()).append(entry)

    def pending_experts(self, layer: int) -> list[int]:
        """Experts with queued work at this layer, ascending id."""
        return sorted(e for (e, l), q in self._queues.items() if l == layer and q)

    def drain(self, expert_id: int, layer: int) -> list[ExpertQueueEntry]:
        queue = self._queues.get((expert_id, layer))
        if not queue:
            return []
        entries = list(queue)
        queue.clear()
        for entry in entries:
            self._live_keys.discard(entry[:4])
        return entries

    def clear_layer(self, layer: int) -> list[ExpertQueueEntry]:
        """Remove and return every queued entry at this layer (used on preemption)."""
        removed: list[ExpertQueueEntry] = []
        for (e, l), queue in sorted(self._queues.items()):
            if l == layer and queue:
                removed.extend(queue)
                for entry in queue:
                    self._live_keys.discard(entry[:4])
                queue.clear()
        return removed

    def total_entries(self) -> int:
        return sum(len(q) for q in self._queues.values())


class _LayerStore:
    """Contiguous, append-only K/V arrays for one sequence at one layer."""

    __slots__ = ("keys", "values", "count")

    def __init__(self, hidden_dim: int):
        self.keys = np.empty((8, hidden_dim))
        self.values = np.empty((8, hidden_dim))
        self.count = 0

    def _reserve(self, extra: int) -> None:
        needed = self.count + extra
        if needed <= self.keys.shape[0]:
            return
        grown = max(16, 2 * self.count, needed)
        new_keys = np.empty((grown, self.keys.shape[1]))
        new_values = np.empty((grown, self.values.shape[1]))
        new_keys[: self.count] = self.keys[: self.count]
        new_values[: self.count] = self.values[: self.count]
        self.keys, self.values = new_keys, new_values

    def append(self, key: np.ndarray, value: np.ndarray) -> None:
        self._reserve(1)
        self.keys[self.count] = key
        self.values[self.count] = value
        self.count += 1

    def append_many(self, keys: np.ndarray, values: np.ndarray) -> None:
        n = keys.shape[0]
        self._reserve(n)
        self.keys[self.count : self.count + n] = keys
        self.values[self.count : self.count + n] = values
        self.count += n


class UnifiedDynamicCache:
    """Per-sequence KV storage with a byte-accounting ledger.

    Entries belong to sequences, never to batches, so changing batch
    composition moves no data.  Each cached entry is one (key, value) pair of
    ``hidden_dim`` doubles: 2 * d * 8 bytes.
    """

    def __init__(self, num_layers: int, hidden_dim: int, capacity_bytes: float = 8 * 1024**3):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.entry_bytes = 2 * hidden_dim * 8
        self.capacity_bytes = capacity_bytes
        self._store: dict[int, list[_LayerStore]] = {}
        self._ledger_bytes = 0

    def register(self, handle: int) -> None:
        if handle in self._store:
            raise SimulationError(f"cache handle {handle} already registered")
        self._store[handle] = [_LayerStore(self.hidden_dim) for _ in range(self.num_layers)]

    def has_handle(self, handle: int) -> bool:
        return handle in self._store

    def can_admit(self, new_entries: int) -> bool:
        return self._ledger_bytes + new_entries * self.entry_bytes <= self.capacity_bytes

    def append(self, handle: int, layer: int, key: np.ndarray, value: np.ndarray) -> None:
        if handle not in self._store:
            raise StateCorruptionError(f"unknown cache handle {handle}")
        if not self.can_admit(1):
            raise CacheCapacityError(
                f"cache capacity {self.capacity_bytes} bytes exceeded at {self._ledger_bytes} used"
            )
        self._store[handle][layer].append(key, value)
        self._ledger_bytes += self.entry_bytes

    def append_many(self, handle: int, layer: int, keys: np.ndarray, values: np.ndarray) -> None:
        if handle not in self._store:
            raise StateCorruptionError(f"unknown cache handle {handle}")
        n = keys.shape[0]
        if not self.can_admit(n):
            raise CacheCapacityError(
                f"cache capacity {self.capacity_bytes} bytes exceeded at {self._ledger_bytes} used"
            )
        self._store[handle][layer].append_many(keys, values)
        self._ledger_bytes += n * self.entry_bytes

    def entries(self, handle: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """(keys, values) array views for one sequence at one layer."""
        store = self._store[handle][layer]
        if store.count == 0:
            raise StateCorruptionError(f"no cache entries for handle {handle} layer {layer}")
        return store.keys[: store.count], store.values[: store.count]

    def count(self, handle: int, layer: int) -> int:
        return self._store[handle][layer].count

    def evict_sequence(self, handle: int) -> None:
        layers = self._store.pop(handle, None)
        if layers is None:
            return
        freed = sum(store.count for store in layers)
        self._ledger_bytes -= freed * self.entry_bytes

    def usage_bytes(self) -> int:
        return self._ledger_bytes

    def recount_bytes(self) -> int:
        """Brute-force recount of every stored entry; test oracle for the ledger."""
        total_entries = sum(store.count for layers in self._store.values() for store in layers)
        return total_entries * self.entry_bytes
