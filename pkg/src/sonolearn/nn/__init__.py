"""Minimal dense-tensor stack: reverse-mode autodiff on numpy arrays, the
convolutional audio encoder, LARS/Adam optimizers, and checkpoint I/O."""

from .tensor import (
    Tensor,
    no_grad,
    is_grad_enabled,
    concat,
    relu,
    linear,
    conv2d_3x3,
    batch_norm,
    maxpool_2x2,
    global_avg_pool,
    l2_normalize,
)
from .encoder import (
    EncoderConfig,
    EncoderState,
    init_encoder_state,
    encoder_forward,
    projector_forward,
    predictor_forward,
    count_parameters,
)
from .optim import OptimizerError, Lars, Adam
from .checkpoint import CheckpointError, save_checkpoint, load_checkpoint
from .gradcheck import check_gradients, max_relative_error

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "relu",
    "linear",
    "conv2d_3x3",
    "batch_norm",
    "maxpool_2x2",
    "global_avg_pool",
    "l2_normalize",
    "EncoderConfig",
    "EncoderState",
    "init_encoder_state",
    "encoder_forward",
    "projector_forward",
    "predictor_forward",
    "count_parameters",
    "OptimizerError",
    "Lars",
    "Adam",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "check_gradients",
    "max_relative_error",
]
