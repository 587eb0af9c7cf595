"""Hybrid federated learning: CLG-SGD, FedCLG-C, FedCLG-S, baselines and their bounds."""

from .data import ClientShard, LabeledDataset, PartitionSpec, ServerDataset
from .errors import HybridFLError
from .model import Objective
from .protocol import ALGORITHMS, HyperParams, TrainingTrace, run_training
from .theory import TheoremConstants

__all__ = [
    "ALGORITHMS",
    "ClientShard",
    "HybridFLError",
    "HyperParams",
    "LabeledDataset",
    "Objective",
    "PartitionSpec",
    "ServerDataset",
    "TheoremConstants",
    "TrainingTrace",
    "run_training",
]

__version__ = "0.1.0"
