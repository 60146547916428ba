"""Training toolkit for binary and ternary weight networks.

Treats a feedforward network as a discrete-time controlled system: states
propagate forward, co-states propagate backward, and each layer's weights
are chosen to maximize a per-layer Hamiltonian. Because the maximization is
over a finite weight set, no gradient step ever touches the discrete
weights, and the same machinery yields checkable optimality conditions and
error estimates (the diagnostics module).
"""

from .data import Dataset, SyntheticRegressionProblem, load_mnist_idx, \
    make_binary_regression, minibatches
from .diagnostics import ErrorEstimateReport, GronwallReport, \
    PmpResidualReport, backprop_equivalence_check, check_error_constant, \
    fit_error_constant, gronwall_check, perturb_parameters, pmp_residual, \
    theorem2_terms
from .layers import Activation, BatchNorm, BinaryDense, DiscreteLayerError, \
    FloatDense, Network, TernaryDense, coefficient_matrix
from .linalg import NonFiniteError, ShapeError
from .msa import Adam, MetricsRecord, MsaState, TrainConfig, basic_msa_step, \
    binary_update, gradient_msa_step, rho_from_heuristic, ternary_update, \
    train, update_moving_average
from .propagation import TerminalLoss, Trajectory, backward_pass, error_rate, \
    forward_pass, objective

__version__ = "0.1.0"

__all__ = [
    "Activation", "Adam", "BatchNorm", "BinaryDense", "Dataset",
    "DiscreteLayerError", "ErrorEstimateReport", "FloatDense",
    "GronwallReport", "MetricsRecord", "MsaState", "Network",
    "NonFiniteError", "PmpResidualReport", "ShapeError",
    "SyntheticRegressionProblem", "TerminalLoss", "TernaryDense",
    "TrainConfig", "Trajectory", "backprop_equivalence_check",
    "backward_pass", "basic_msa_step", "binary_update",
    "check_error_constant", "coefficient_matrix", "error_rate",
    "fit_error_constant", "forward_pass", "gradient_msa_step",
    "gronwall_check", "load_mnist_idx", "make_binary_regression",
    "minibatches", "objective", "perturb_parameters", "pmp_residual",
    "rho_from_heuristic", "ternary_update", "theorem2_terms", "train",
    "update_moving_average",
]
