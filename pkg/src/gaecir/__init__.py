"""Gated autoencoders with content-invariance regularization."""

from .cir import CirSchedule, MappingTable, nearest_neighbors, sample_partner, schedule_at
from .data import ImageSet, PairDataset, TransformationSet
from .evaluate import MetricsReport
from .model import GaeConfig, GaeGradients, GaeParams, LossBreakdown, PenaltyConfig
from .train import Checkpoint, TrainConfig, TrainState

__all__ = [
    "CirSchedule", "MappingTable", "nearest_neighbors", "sample_partner",
    "schedule_at", "ImageSet", "PairDataset", "TransformationSet",
    "MetricsReport", "GaeConfig", "GaeGradients", "GaeParams",
    "LossBreakdown", "PenaltyConfig", "Checkpoint", "TrainConfig", "TrainState",
]

__version__ = "0.1.0"
