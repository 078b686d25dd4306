"""Learned resource allocation for mobile edge computing.

The package builds MEC task-offloading instances, encodes them as bipartite
graphs, and trains a link-output graph attention network to allocate
offloading shares, transmit power and server compute by descending the total
processing delay directly.
"""

from .core import (
    Allocation, FeasibilityReport, McInstance, PhysicalConstants, check_feasibility, generate_instance,
    optimal_delay_single, project_to_feasible, total_delay, transmission_rate,
)
from .errors import ConfigurationError, InvalidArgumentError, NumericError
from .graph import LinkWeights, ProblemGraph, decode_allocation, encode_graph
from .lognn import LognnModel, allocate, count_decision_dims, forward, init_model

__all__ = [
    "Allocation", "FeasibilityReport", "McInstance", "PhysicalConstants", "check_feasibility",
    "generate_instance", "optimal_delay_single", "project_to_feasible", "total_delay", "transmission_rate",
    "ConfigurationError", "InvalidArgumentError", "NumericError", "LinkWeights", "ProblemGraph",
    "decode_allocation", "encode_graph", "LognnModel", "allocate", "count_decision_dims", "forward", "init_model",
]
