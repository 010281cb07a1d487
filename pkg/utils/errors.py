from __future__ import annotations

from typing import Optional

import numpy as np


class MfgError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(MfgError, ValueError):
    """Invalid experiment configuration or invalid constructor arguments."""


class GridMismatchError(MfgError, ValueError):
    pass


class MinimizerError(MfgError, ArithmeticError):
    """The generic Hamiltonian minimizer did not converge."""

    def __init__(self, message: str, last_iterate: np.ndarray, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.last_iterate = np.asarray(last_iterate, dtype=float)
        self.residual = float(residual)


class IntegrationError(MfgError, ArithmeticError):
    """Non-finite values appeared while integrating an ODE."""

    def __init__(self, message: str, time_index: int, cell: int):
        super().__init__(f"{message} at time index {time_index}, cell {cell}")
        self.time_index = time_index
        self.cell = cell


class SimplexViolationError(MfgError, ArithmeticError):
    def __init__(self, time_index: int, cell: int, violation: float):
        super().__init__(
            f"forward solve left the probability simplex by {violation:.3e} at time index {time_index}, "
            f"cell {cell}; use a smaller dt (more n_steps) or the implicit-Euler integrator"
        )
        self.time_index = time_index
        self.cell = cell
        self.violation = violation


class RateCapError(MfgError, ValueError):
    pass


class NormBudgetError(MfgError, ValueError):
    pass


class NonlinearInteractionError(MfgError, ValueError):
    pass


class ArtifactError(MfgError, OSError):
    """A saved artifact is missing or unreadable."""

    def __init__(self, message: str, file_name: Optional[str] = None):
        super().__init__(message)
        self.file_name = file_name
