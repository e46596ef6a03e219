"""Exception types shared across the engine."""


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An operation was invoked outside its contract (e.g. non-scalar grad target)."""


class TapeLookupError(KeyError):
    """A referenced value does not live on the tape being differentiated."""


class DomainError(ValueError):
    """Scalar argument outside the mathematical domain of the function."""


class SvdConvergenceError(RuntimeError):
    """One-sided Jacobi failed to converge within the sweep budget.

    Carries the worst remaining relative off-diagonal residual.
    """

    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"jacobi svd did not converge after {sweeps} sweeps "
            f"(worst off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class DegenerateSvdError(RuntimeError):
    """Singular values too close (or too small) for a stable full SVD backward."""


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


class TrainingAbort(RuntimeError):
    """Meta-training hit a non-finite loss; carries the iteration index."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"training aborted at iteration {iteration}: {message}")
        self.iteration = iteration


class StateIOError(RuntimeError):
    """A persisted run directory or state file is missing or corrupt."""
