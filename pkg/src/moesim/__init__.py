"""moesim: a discrete-event simulator for priority-aware preemptive
scheduling of Mixture-of-Experts inference.

A deterministic toy MoE core with per-expert queues and checkpoint/resume
runs under two schedulers -- a fine-grained priority-aware preemptive one and
an iteration-level FCFS continuous-batching baseline -- on a shared virtual
clock and cost model, so latency/throughput trade-offs can be reproduced at
desk scale.
"""

from .core import (
    Batch,
    Checkpoint,
    EngineReport,
    EOS_TOKEN,
    MemberProgress,
    Phase,
    Priority,
    SchedulerDirective,
    Sequence,
    SimulationError,
    Stage,
    batch_form,
    sequence_new,
)
from .engine import Completed, CostModel, InferenceEngine, Preempted, VirtualClock
from .metrics import AggregateReport, JobRecord, MetricsRecorder, aggregate
from .model import ExpertQueueEntry, ExpertQueues, ModelConfig, MoEModel, UnifiedDynamicCache
from .sched import BaselineScheduler, POLICIES, QllmScheduler, QueueSnapshot
from .sim import RunResult, Simulation, run_simulation
from .workload import TraceRecord, WorkloadSpec, generate, load_trace, save_trace

__version__ = "0.1.0"

__all__ = [
    "AggregateReport",
    "BaselineScheduler",
    "Batch",
    "Checkpoint",
    "Completed",
    "CostModel",
    "EngineReport",
    "EOS_TOKEN",
    "ExpertQueueEntry",
    "ExpertQueues",
    "InferenceEngine",
    "JobRecord",
    "MemberProgress",
    "MetricsRecorder",
    "ModelConfig",
    "MoEModel",
    "POLICIES",
    "Phase",
    "Preempted",
    "Priority",
    "QllmScheduler",
    "QueueSnapshot",
    "RunResult",
    "SchedulerDirective",
    "Sequence",
    "Simulation",
    "SimulationError",
    "Stage",
    "TraceRecord",
    "UnifiedDynamicCache",
    "VirtualClock",
    "WorkloadSpec",
    "aggregate",
    "batch_form",
    "generate",
    "load_trace",
    "run_simulation",
    "save_trace",
    "sequence_new",
]
