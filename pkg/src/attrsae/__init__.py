"""Top-k sparse autoencoders for attribute steering of text embeddings."""

from .core import (
    GradientSet,
    aux_loss,
    aux_selection,
    decode,
    encode,
    loss_gradients,
    mse_loss,
    reconstruct,
    top_k_select,
    total_loss,
)
from .domain import (
    DeadMask,
    DimensionMismatch,
    EmptyBatch,
    LossBreakdown,
    NonFiniteValue,
    SaeModel,
    SparseCode,
    TrainConfig,
    validate_batch,
)
from .steering import (
    AttributeDirection,
    SteerRequest,
    extract_direction,
    manipulate,
    steering_offset,
    sweep,
)
from .trainer import TrainReport, init_model, train

__version__ = "0.1.0"
