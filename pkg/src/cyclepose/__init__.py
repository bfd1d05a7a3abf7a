"""Multi-cycle keypoint-token pose transformer with cycle self-distillation."""
from .config import DataConfig, ModelConfig, RunConfig, TrainConfig, __version__

__all__ = ["DataConfig", "ModelConfig", "RunConfig", "TrainConfig", "__version__"]
