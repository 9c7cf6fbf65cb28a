"""Class-incremental learning for 1-D spectral classification."""

from .autograd import Tensor, no_grad
from .config import ExperimentConfig
from .network import NetworkSpec, build_backbone
from .plasticity import CbConfig, ContinualBackprop
from .strategies import STRATEGIES, StrategyConfig, make_strategy

__all__ = [
    "Tensor", "no_grad", "ExperimentConfig", "NetworkSpec", "build_backbone",
    "CbConfig", "ContinualBackprop", "STRATEGIES", "StrategyConfig",
    "make_strategy",
]

__version__ = "0.1.0"
