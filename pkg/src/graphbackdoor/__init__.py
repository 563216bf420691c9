"""Backdoor attacks on discrete graph diffusion models, at desk scale."""
from .config import ExperimentConfig, load_config
from .graphs import Graph, SoftGraph, TriggerMasks, TriggerSpec, ValenceTable, canonical_hash, default_trigger
from .schedule import LimitDistributions, NoiseSchedule, cosine_schedule

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "Graph", "LimitDistributions", "NoiseSchedule", "SoftGraph", "TriggerMasks",
    "TriggerSpec", "ValenceTable", "canonical_hash", "cosine_schedule", "default_trigger", "load_config",
]
