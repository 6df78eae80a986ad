"""Numpy multi-network facial-expression classifier: FA layers, multi-loss training, FGA fusion and T2V ensembles."""
from .ensemble import combine, noi, t2v, t2v_label_vector, top1_vote
from .errors import (
    ConfigurationError,
    FormatError,
    FusionVoteError,
    InputError,
    NonFiniteLossError,
    PreconditionError,
    SpecMismatchError,
)
from .fga import FGAConfig, Population, evolve_generation, fuse_weights
from .losses import LossPolicy, ce_loss, class_weights, lsr_loss
from .model_zoo import NetworkSpec, NetworkState, build, forward, minicnn_spec
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "FGAConfig", "FormatError", "FusionVoteError", "InputError", "LossPolicy",
    "NetworkSpec", "NetworkState", "NonFiniteLossError", "Population", "PreconditionError",
    "SpecMismatchError", "TrainConfig", "build", "ce_loss", "class_weights", "combine", "evaluate",
    "evolve_generation", "forward", "fuse_weights", "lsr_loss", "minicnn_spec", "noi", "t2v",
    "t2v_label_vector", "top1_vote", "train",
]
