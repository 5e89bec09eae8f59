"""Federated learning simulator with Fisher-informed parameterwise aggregation."""
from .aggregation import ClientUpdate, ServerConfig, aggregate
from .curvature import FisherSketch, SketchConfig, sketch_fim
from .estimators import FIPAClassifier, FIPARegressor
from .federation import RoundConfig, Schedule, run_experiment, run_round
from .models import MlpSpec, ParamVector, init_params

__all__ = [
    "ClientUpdate", "FIPAClassifier", "FIPARegressor", "FisherSketch", "MlpSpec", "ParamVector",
    "RoundConfig", "Schedule", "ServerConfig", "SketchConfig", "aggregate", "init_params",
    "run_experiment", "run_round", "sketch_fim",
]
__version__ = "0.1.0"
