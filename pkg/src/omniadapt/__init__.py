"""Masked multi-view imitation learning on a toy manipulation simulator."""

from .attention import CBAM, ChannelAttention, SpatialAttention, stack_views
from .backbone import (
    AffineRouter,
    BNParamSet,
    DynamicBatchNorm2d,
    ResidualBackbone,
    dabn_forward,
    route_bn_params,
    set_freeze,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .policy import (
    ActionChunk,
    ArchConfig,
    ChunkBuffer,
    ChunkDecoder,
    ProprioEncoder,
    TokenFuser,
    VisuomotorPolicy,
    smooth_trajectory,
)
from .training import (
    ChunkDataset,
    DatasetError,
    TrainConfig,
    TrainingDiverged,
    adapt_to_task,
    build_dataset,
    chunk_loss,
    fit,
)

__version__ = "0.1.0"

__all__ = [
    "ActionChunk",
    "AffineRouter",
    "ArchConfig",
    "BNParamSet",
    "CBAM",
    "ChannelAttention",
    "CheckpointError",
    "ChunkBuffer",
    "ChunkDataset",
    "ChunkDecoder",
    "DatasetError",
    "ProprioEncoder",
    "ResidualBackbone",
    "SpatialAttention",
    "TokenFuser",
    "TrainConfig",
    "TrainingDiverged",
    "VisuomotorPolicy",
    "adapt_to_task",
    "build_dataset",
    "chunk_loss",
    "dabn_forward",
    "fit",
    "load_checkpoint",
    "route_bn_params",
    "save_checkpoint",
    "set_freeze",
    "smooth_trajectory",
    "stack_views",
]
