"""
Dissipaton-embedded quantum master equation for the Anderson impurity model,
solved by reference time integration and by a physics-informed neural network
with time-domain decomposition.
"""
from .bath import (BathError, BathSpec, ExponentialMode, Reservoir, correlation_from_modes,
                   correlation_quadrature_oracle, expand_correlation, pade_poles_residues)
from .dqme import (DqmeError, Liouvillian, RdtBasis, SystemSpec, build_liouvillian,
                   enumerate_basis, levels_from_modes, reachability_filter)
from .optim import OptimizerOptions, bfgs_minimize, warm_start_transfer
from .pinn import FeatureMap, LossWeights, PinnModel, init_model, loss_eval, loss_gradient, rdt_eval
from .reference import Trajectory, propagate_reference

__version__ = "0.1.0"

__all__ = [
    "BathError", "BathSpec", "ExponentialMode", "Reservoir", "correlation_from_modes",
    "correlation_quadrature_oracle", "expand_correlation", "pade_poles_residues",
    "DqmeError", "Liouvillian", "RdtBasis", "SystemSpec", "build_liouvillian",
    "enumerate_basis", "levels_from_modes", "reachability_filter",
    "OptimizerOptions", "bfgs_minimize", "warm_start_transfer",
    "FeatureMap", "LossWeights", "PinnModel", "init_model", "loss_eval", "loss_gradient", "rdt_eval",
    "Trajectory", "propagate_reference", "__version__",
]
