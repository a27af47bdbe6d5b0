"""Flow-matching sequential recommendation."""

from flowrec.config import (
    DataConfig,
    FlowConfig,
    ModelConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
)

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "FlowConfig",
    "ModelConfig",
    "RunConfig",
    "SamplerConfig",
    "TrainConfig",
]
