"""Deterministic simulator of CPU requests and limits on a container cluster.

Models CFS shares and quota throttling, request-sum placement, HPA and YAAS
autoscaling, and resource/utilization/performance billing.
"""

from .errors import ConfigError, NoFit, SimulationError
from .metrics import MetricsReport, export, percentile, time_to_meet_slo
from .scenario import ScenarioConfig, parse_scenario, parse_scenario_dict
from .simulator import Simulation, run

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "NoFit", "SimulationError", "MetricsReport", "ScenarioConfig", "Simulation",
    "export", "parse_scenario", "parse_scenario_dict", "percentile", "run", "time_to_meet_slo",
]
