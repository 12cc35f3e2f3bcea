"""Discrete-event cluster simulator: cost model, training oracle, event loop, traces."""

from .cost import CostModel, SyntheticOracle, prefix_signature, to_us
from .engine import (
    Action,
    MetricReport,
    Mode,
    Simulation,
    SimulationResult,
    StudySetup,
    TrialRecord,
    aggregate,
    expand_assignment,
    run,
    worker_execute,
)
from .trace import Kind, TraceEvent, busy_us, read_trace, trace_csv, write_trace

__all__ = [
    "Action",
    "CostModel",
    "Kind",
    "MetricReport",
    "Mode",
    "Simulation",
    "SimulationResult",
    "StudySetup",
    "SyntheticOracle",
    "TraceEvent",
    "TrialRecord",
    "aggregate",
    "busy_us",
    "expand_assignment",
    "prefix_signature",
    "read_trace",
    "run",
    "to_us",
    "trace_csv",
    "worker_execute",
    "write_trace",
]
