"""Energy-based flow matching with an idempotent flow map."""

from .estimator import IDFlowGenerator
from .flow import PathConfig, TrainConfig, train, train_step
from .geometry import Frame, FrameChain
from .nn import FlowModel, NetConfig
from .sampler import SampleConfig, predictor_refiner_sample
from .tasks import TaskSpec

__version__ = "0.1.0"

__all__ = [
    "FlowModel",
    "Frame",
    "FrameChain",
    "IDFlowGenerator",
    "NetConfig",
    "PathConfig",
    "SampleConfig",
    "TaskSpec",
    "TrainConfig",
    "predictor_refiner_sample",
    "train",
    "train_step",
]
