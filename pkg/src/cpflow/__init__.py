"""Convex potential flows: normalizing flows built from gradients of input-convex networks."""
from .activations import Activation, parse_activation
from .flow import (
    FlowLayer,
    FlowStack,
    InversionError,
    LogDensityResult,
    gaussian_ot_reference,
    inverse,
    log_density,
    nll_training_loss,
    stack_forward,
    stack_inverse,
    surrogate_logdet_grad_objective,
    transport_cost,
)
from .icnn import ICNNConfig, PotentialParams, actnorm_data_init, grad_map, init_params, potential

__version__ = "0.1.0"
