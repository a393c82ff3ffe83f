from .layers import Tensor, conv2d_backward, conv2d_forward, cross_entropy, softmax
from .model import (EARLY, FEATURES, LATE, MID, ConvSpec, FusionSpec, Model, ModelConfig,
                    ResCNNBlockSpec, build_model, forward, predict)
from .train import AdamState, train_step

__all__ = [
    "Tensor", "conv2d_forward", "conv2d_backward", "cross_entropy", "softmax",
    "EARLY", "MID", "LATE", "FEATURES", "ConvSpec", "ResCNNBlockSpec", "ModelConfig",
    "FusionSpec", "Model", "build_model", "forward", "predict", "AdamState", "train_step",
]
