from .config import ExperimentConfig, ExperimentKind, load_preset
from .exceptions import (
    AcceptanceError,
    ConfigurationError,
    DomainError,
    EstimationError,
    FitConvergenceError,
    ZplSourceError,
)
from .photophysics import MoleculeModel
from .runner import ExperimentRunner, compare_report, run_experiment
from .streams import PhotonStream, SimConfig

__all__ = [
    "ExperimentConfig",
    "ExperimentKind",
    "ExperimentRunner",
    "MoleculeModel",
    "PhotonStream",
    "SimConfig",
    "compare_report",
    "load_preset",
    "run_experiment",
    "ZplSourceError",
    "DomainError",
    "ConfigurationError",
    "AcceptanceError",
    "EstimationError",
    "FitConvergenceError",
]

__version__ = "0.1.0"
