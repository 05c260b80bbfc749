"""End-to-end behavior of the FCFS continuous-batching baseline."""

import pytest

from moesim.core import Phase, Priority
from moesim.engine import CostModel
from moesim.model import ModelConfig
from moesim.sim import run_simulation
from moesim.workload import TraceRecord

CFG = ModelConfig(num_layers=3, hidden_dim=8, num_experts=4, top_k=2, vocab_size=64, seed=21)
COST = CostModel()


def rec(i, arrival_ms, priority, prompt_len, out_len, seed=None):
    return TraceRecord(
        id=i, arrival_ms=arrival_ms, priority=priority,
        prompt_len=prompt_len, max_new_tokens=out_len,
        prompt_seed=seed if seed is not None else 100 + i,
    )


def test_empty_system_single_arrival_prefills_immediately():
    trace = [rec(0, 500.0, Priority.LATENCY_SENSITIVE, 6, 3)]
    res = run_simulation(trace, model_config=CFG, cost_model=COST, scheduler="baseline")
    assert res.probes.prefill_start[0] == pytest.approx(500.0)
    assert len(res.records) == 1
    phases = [it.phase for it in res.probes.iterations]
    assert phases[0] is Phase.PREFILL
    assert all(p is Phase.DECODE for p in phases[1:])


def test_baseline_never_preempts_or_redirects():
    trace = [
        rec(0, 0.0, Priority.BEST_EFFORT, 12, 6),
        rec(1, 30.0, Priority.LATENCY_SENSITIVE, 4, 2),
        rec(2, 60.0, Priority.LATENCY_SENSITIVE, 4, 2),
    ]
    res = run_simulation(trace, model_config=CFG, cost_model=COST, scheduler="baseline")
    assert res.probes.preemptions == 0
    assert all(not it.preempted for it in res.probes.iterations)


def test_ls_arriving_mid_iteration_waits_for_the_boundary():
    """HOL blocking: an LS landing inside a BE decode iteration cannot prefill
    before that iteration completes."""
    be = rec(0, 0.0, Priority.BEST_EFFORT, 16, 8)
    probe = run_simulation([be], model_config=CFG, cost_model=COST, scheduler="baseline")
    decode_iters = [it for it in probe.probes.iterations if it.phase is Phase.DECODE]
    target = decode_iters[1]
    arrival = target.start_ms + 0.4 * target.duration_ms  # one stage-ish into the iteration

    ls = rec(1, arrival, Priority.LATENCY_SENSITIVE, 4, 2)
    res = run_simulation([be, ls], model_config=CFG, cost_model=COST, scheduler="baseline")
    start = res.probes.prefill_start[1]
    assert start >= target.end_ms
    assert start - arrival >= 0.5 * target.duration_ms  # waited most of the iteration


def test_qllm_beats_baseline_reaction_on_the_same_scenario():
    be = rec(0, 0.0, Priority.BEST_EFFORT, 16, 8)
    probe = run_simulation([be], model_config=CFG, cost_model=COST, scheduler="baseline")
    decode_iters = [it for it in probe.probes.iterations if it.phase is Phase.DECODE]
    target = decode_iters[1]
    arrival = target.start_ms + 0.4 * target.duration_ms
    ls = rec(1, arrival, Priority.LATENCY_SENSITIVE, 4, 2)

    base = run_simulation([be, ls], model_config=CFG, cost_model=COST, scheduler="baseline")
    qllm = run_simulation([be, ls], model_config=CFG, cost_model=COST, scheduler="qllm")
    base_delay = base.probes.prefill_start[1] - arrival
    qllm_delay = qllm.probes.prefill_start[1] - arrival
    bound = qllm.probes.max_stage_cost_ms + COST.checkpoint_cost + COST.restore_cost + 1e-9
    assert qllm_delay <= bound
    assert base_delay > qllm_delay


def test_full_batch_arrivals_wait_for_a_finisher():
    trace = [rec(i, 0.0, Priority.BEST_EFFORT, 4, 3) for i in range(3)]
    res = run_simulation(
        trace, model_config=CFG, cost_model=COST, scheduler="baseline", max_batch_size=2
    )
    assert len(res.records) == 3
    # the third job's prefill must start only after someone finished
    first_finish = min(r.finish_ms for r in res.records)
    assert res.probes.prefill_start[2] >= first_finish


def test_single_sequence_identical_tokens_across_all_schedulers():
    trace = [rec(0, 0.0, Priority.BEST_EFFORT, 10, 6)]
    streams = {}
    for name in ("baseline", "qllm", "never-preempt"):
        res = run_simulation(trace, model_config=CFG, cost_model=COST, scheduler=name)
        streams[name] = res.sequences[0].generated
    assert streams["baseline"] == streams["qllm"] == streams["never-preempt"]
