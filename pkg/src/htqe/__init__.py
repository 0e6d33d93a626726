"""Fine-grained quality estimation for human translations."""

from .dataset import ASPECTS, Corpus, Example, ScoreVector
from .model import ModelConfig, QEModel
from .training import TrainConfig

__all__ = ["ASPECTS", "Corpus", "Example", "ModelConfig", "QEModel", "ScoreVector", "TrainConfig"]
__version__ = "0.1.0"
