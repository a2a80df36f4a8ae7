"""Discrete-event simulator of a multi-node LLM serving cluster with tiered,
advisory-driven K,V cache management."""

from .costmodel import CostModel, GpuProfile, LinkProfile
from .engine import EngineConfig, Policy, SimulationError
from .scheduler import SchedulerConfig, load_imbalance
from .simcore import ClusterConfig, RunConfig, RunResult, SimConfig, run
from .workload import Trace, load_trace, save_trace

__all__ = ["ClusterConfig", "CostModel", "EngineConfig", "GpuProfile", "LinkProfile", "Policy",
           "RunConfig", "RunResult", "SchedulerConfig", "SimConfig", "SimulationError",
           "Trace", "load_imbalance", "load_trace", "run", "save_trace"]
