from .layers import Layer, ShapeError, glorot_uniform, make_conv, make_linear
from .losses import (cosine_grad, cosine_similarity, cross_entropy,
                     cross_entropy_grad, mse, mse_grad, sigmoid)
from .network import (GradientError, Grads, GraphBuilder, Network, Node, SGD,
                      Tape, sgd_step)
from . import checkpoint, gradcheck

__all__ = [
    "Layer", "ShapeError", "glorot_uniform", "make_conv", "make_linear",
    "cosine_grad", "cosine_similarity", "cross_entropy", "cross_entropy_grad",
    "mse", "mse_grad", "sigmoid",
    "GradientError", "Grads", "GraphBuilder", "Network", "Node", "SGD",
    "Tape", "sgd_step", "checkpoint", "gradcheck",
]
