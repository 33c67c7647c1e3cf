"""Distributed evaluation: rank assignment, task lists, transports and runtime."""

from .assignment import AssignmentError, RankAssignment, assign_clusters, m2l_effort, uniform_temporal_tree
from .driver import DistributedFMM, direction_violations
from .runtime import DeadlockError, RankRuntime, WriteMonitor
from .tasks import DependencyCycleError, build_let, build_task_lists, check_acyclic, static_message_counts
from .trace import TraceRecorder, lanes_overlap, summarize
from .transport import ProtocolError, TransportError, make_endpoints

__all__ = [
    "AssignmentError", "RankAssignment", "assign_clusters", "m2l_effort", "uniform_temporal_tree",
    "DistributedFMM", "direction_violations", "DeadlockError", "RankRuntime", "WriteMonitor",
    "DependencyCycleError", "build_let", "build_task_lists", "check_acyclic", "static_message_counts",
    "TraceRecorder", "lanes_overlap", "summarize", "ProtocolError", "TransportError", "make_endpoints",
]
