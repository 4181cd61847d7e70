"""Exception types shared by the package."""


class LQKernelError(Exception):
    """Base class for all package errors."""


class DomainError(LQKernelError, ValueError):
    """A time argument lies outside the horizon [0, T]."""


class NumericalError(LQKernelError, ArithmeticError):
    """A factorization or solve failed (singular or badly conditioned data)."""


class UsageError(LQKernelError, ValueError):
    """Inputs are inconsistent with the requested operation."""


class UnsupportedModeError(LQKernelError):
    """The operation is not available for the kernel mode in use."""
