"""Invertible prototypical networks: a normalizing flow with per-class
Gaussian-mixture prototypes in its latent space."""
from .data import AugmentationSpec, Dataset, load_idx, make_two_moons
from .estimator import ProtoFlowClassifier
from .flow import FlowModel, build_flow
from .head import PrototypeHead
from .losses import LossWeights
from .numerics import RngStream
from .training import TrainConfig, train

__all__ = [
    "AugmentationSpec", "Dataset", "FlowModel", "LossWeights", "PrototypeHead",
    "ProtoFlowClassifier", "RngStream", "TrainConfig", "build_flow", "load_idx",
    "make_two_moons", "train",
]
__version__ = "0.1.0"
