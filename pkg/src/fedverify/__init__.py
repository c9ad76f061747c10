"""Verifying participant-level unlearning in federated learning.

A leaving participant plants markers in the global model before it asks to
be forgotten, then checks whether the markers' performance moves after the
server claims to have unlearned it.
"""

from .config import ExperimentConfig, config_from_dict, load_config
from .errors import (
    CapabilityError,
    ConfigError,
    FedVerifyError,
    FormatError,
    LookupFailure,
    MarkingInfeasible,
    NumericError,
)
from .mechanism import ExperimentLog, run_experiment, sweep

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentLog",
    "FedVerifyError",
    "FormatError",
    "LookupFailure",
    "MarkingInfeasible",
    "NumericError",
    "config_from_dict",
    "load_config",
    "run_experiment",
    "sweep",
]
