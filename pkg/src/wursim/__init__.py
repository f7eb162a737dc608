"""Wake-up radio polling: analytic models, grouping heuristics and a simulator."""

from .analytic import NetworkParams, NodeRates, UnstableSystemError, tdma_model
from .experiment import SweepSpec, allocate_rates, run_sweep
from .simcore import Protocol, ProtocolKind, SimOutcome, energy_efficiency, simulate

__all__ = [
    "NetworkParams",
    "NodeRates",
    "Protocol",
    "ProtocolKind",
    "SimOutcome",
    "SweepSpec",
    "UnstableSystemError",
    "allocate_rates",
    "energy_efficiency",
    "run_sweep",
    "simulate",
    "tdma_model",
]
__version__ = "0.1.0"
