"""Deterministic discrete-event cluster simulator."""

from .config import ConfigInvalid, ScenarioConfig, bundled, load, parse
from .eventlog import EventLog, Verdict
from .runner import RunResult, run_scenario

__all__ = [
    "ConfigInvalid",
    "EventLog",
    "RunResult",
    "ScenarioConfig",
    "Verdict",
    "bundled",
    "load",
    "parse",
    "run_scenario",
]
