from .engine import (GraphFreedError, NonFiniteError, ShapeError, Tensor, backward, batchnorm,
                     conv1d, conv_output_length, cosine_similarity, custom_op, dense, leaky_relu,
                     set_finite_checks, softmax, softmax_cross_entropy, tconv1d,
                     tconv_output_length, tensor)
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import (BatchNorm1d, Conv1d, ConvTranspose1d, Dense, Flatten, LayerSpec, LeakyReLU,
                     Module, Sequential, Unflatten, build_stack)
from .optim import Adam, adam_step

__all__ = [
    "Adam", "BatchNorm1d", "Conv1d", "ConvTranspose1d", "Dense", "Flatten", "GradCheckReport",
    "GraphFreedError", "LayerSpec", "LeakyReLU", "Module", "NonFiniteError", "Sequential",
    "ShapeError", "Tensor", "Unflatten", "adam_step", "backward", "batchnorm", "build_stack",
    "conv1d", "conv_output_length", "cosine_similarity", "custom_op", "dense",
    "finite_diff_check", "leaky_relu", "set_finite_checks", "softmax", "softmax_cross_entropy",
    "tconv1d", "tconv_output_length", "tensor",
]
