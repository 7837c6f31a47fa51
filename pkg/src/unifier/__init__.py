"""Continual multi-scenario VQA at desk scale.

A numpy reverse-mode autodiff engine drives a toy vision transformer whose
blocks carry per-scenario bottleneck branches merged by a shared projector,
trained under a consistency loss and scored with VQA and grounding F1.
"""

from .config import RunConfig
from .estimator import ContinualVQA
from .exceptions import ConfigError, ContractError, IntegrityError, ProtocolError, ShapeError, UnifierError
from .harness import aggregate, build_stream, evaluate, run_protocol

__all__ = [
    "ConfigError",
    "ContinualVQA",
    "ContractError",
    "IntegrityError",
    "ProtocolError",
    "RunConfig",
    "ShapeError",
    "UnifierError",
    "aggregate",
    "build_stream",
    "evaluate",
    "run_protocol",
]

__version__ = "0.1.0"
