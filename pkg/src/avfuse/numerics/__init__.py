"""Deterministic float64 tensor core with reverse-mode differentiation."""
from avfuse.numerics.functional import conv2d_forward, cross_entropy_confidence, softmax
from avfuse.numerics.gradcheck import finite_diff_check, max_relative_error
from avfuse.numerics.metrics import Metrics, compute_metrics
from avfuse.numerics.nn import Conv2d, Linear, Module, Parameter
from avfuse.numerics.optim import OptimizerState, sgd_step
from avfuse.numerics.tensor import Tensor, backward, no_grad

__all__ = [
    "Tensor", "backward", "no_grad", "Module", "Parameter", "Conv2d", "Linear",
    "conv2d_forward", "cross_entropy_confidence", "softmax", "finite_diff_check",
    "max_relative_error", "compute_metrics", "Metrics", "OptimizerState", "sgd_step",
]
