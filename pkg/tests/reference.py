"""Straight-line generation oracle used by the tests.

Runs one sequence at a time with plain per-token loops and private KV lists:
no engine, no stages, no expert queues, no checkpoints, no shared cache, no
batching.  It reuses only the primitive per-token math (attention, routing,
expert forward, combine, emission), so a comparison against the engine
exercises the entire scheduling/preemption/state-management machinery.
"""

from __future__ import annotations

import numpy as np

from moesim.core import EOS_TOKEN
from moesim.model import MoEModel


def _run_tokens(model: MoEModel, kv: list[tuple[list, list]], tokens: list[int]) -> np.ndarray:
    """Push tokens through all layers, extending the private cache; returns the
    final hidden state of the last token."""
    hidden = [model.embed(t) for t in tokens]
    for layer in range(model.config.num_layers):
        keys_list, values_list = kv[layer]
        attended = []
        for h in hidden:
            k, v = model.kv_project(h, layer)
            keys_list.append(k)
            values_list.append(v)
            from moesim.model import attend

            attended.append(attend(h, np.stack(keys_list), np.stack(values_list)))
        nxt = []
        for h_att in attended:
            routing = model.route(h_att, layer)
            outputs = {eid: model.expert_forward(eid, layer, h_att) for eid in sorted(routing)}
            nxt.append(model.combine(h_att, routing, outputs, set()))
        hidden = nxt
    return hidden[-1]


def reference_generate(model: MoEModel, prompt: list[int], max_new_tokens: int) -> list[int]:
    """The zero-preemption oracle: prompt -> generated token ids."""
    kv: list[tuple[list, list]] = [([], []) for _ in range(model.config.num_layers)]
    final = _run_tokens(model, kv, list(prompt))
    out = [model.emit_token(final)]
    while len(out) < max_new_tokens and out[-1] != EOS_TOKEN:
        final = _run_tokens(model, kv, [out[-1]])
        out.append(model.emit_token(final))
    return out
