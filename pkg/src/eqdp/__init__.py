"""Group-equivariant convolutional networks trained with differentially private SGD."""
from .estimator import BudgetExceeded, EquivariantDPClassifier
from .groups import FieldType, GroupElement, GroupSpec
from .kernels import solve_kernel_basis
from .model import build_eq_resnet9, check_model_equivariance, count_parameters

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded", "EquivariantDPClassifier", "FieldType", "GroupElement", "GroupSpec", "solve_kernel_basis",
    "build_eq_resnet9", "check_model_equivariance", "count_parameters",
]
