"""Small float64 reverse-mode autodiff core used to train every model here."""

from .checkpoint import FORMAT_VERSION, CheckpointError
from .functional import (
    DomainError,
    binary_cross_entropy,
    cross_entropy,
    gaussian_reparam_sample,
    heaviside,
    kl_diag_gaussians,
    log_softmax,
    mse,
    relu,
    sigmoid,
    softmax,
    tanh,
)
from .gradcheck import grad_check, grad_check_params, numeric_gradient
from .nn import MLP, Parameter, init_parameter
from .optim import OptimizerState, StepScheduler, zero_grad
from .rng import RngStreams, stream
from .tensor import (
    ShapeError,
    Tensor,
    UsageError,
    affine,
    as_tensor,
    concat,
    debug_mode,
    exp,
    log,
    matmul,
    no_grad,
    square,
    track_kinks,
    where,
)
