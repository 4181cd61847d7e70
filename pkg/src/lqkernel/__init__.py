"""Linear-quadratic optimal control with affine state constraints, solved through
the matrix-valued reproducing kernel of the trajectory space."""
from .errors import DomainError, LQKernelError, NumericalError, UnsupportedModeError, UsageError
from .kernel import GENERAL_Q, ZERO_Q, LQKernel, RepresenterFunction, gramian, inner
from .linsys import LinearSystem, MatrixFunction, StateTransition, propagate
from .socp import (LossPoint, ProblemSpec, SOCProgram, Solution, assemble, export_conic, solve,
                   terminal_adjoint)
from .tightening import ConstraintSpec, Covering, build_uniform_covering, tighten
from .trajectory import audit, cost_report, reconstruct

__all__ = [
    "ConstraintSpec", "Covering", "DomainError", "GENERAL_Q", "LQKernel", "LQKernelError",
    "LinearSystem", "LossPoint", "MatrixFunction", "NumericalError", "ProblemSpec",
    "RepresenterFunction", "SOCProgram", "Solution", "StateTransition", "UnsupportedModeError",
    "UsageError", "ZERO_Q", "assemble", "audit", "build_uniform_covering", "cost_report",
    "export_conic", "gramian", "inner", "propagate", "reconstruct", "solve", "terminal_adjoint",
    "tighten",
]
