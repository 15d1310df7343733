"""Inverse design of coupled square-ring resonator filters by policy search.

The main entry points are :func:`resinv.geometry.map_actions` (action vector
to layout), :func:`resinv.evaluator.surrogate_eval` (layout to transfer
function) and :class:`resinv.trainer.Trainer`.
"""
from .evaluator import SurrogateConfig, TransferFunction, error_db, surrogate_eval
from .geometry import CircuitDesign, CompoundAction, GeometryConfig, map_actions
from .policy import Policy, PolicyArch
from .trainer import TrainConfig, Trainer, random_search

__version__ = "0.1.0"

__all__ = [
    "CircuitDesign", "CompoundAction", "GeometryConfig", "map_actions",
    "SurrogateConfig", "TransferFunction", "error_db", "surrogate_eval",
    "Policy", "PolicyArch", "TrainConfig", "Trainer", "random_search",
]
