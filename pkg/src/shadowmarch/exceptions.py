"""Exception hierarchy for shadowmarch."""


class ShadowingError(Exception):
    """Base class for all numerical failures raised by the package."""


class ConfigError(ShadowingError, ValueError):
    """Invalid run configuration (detected before any compute)."""


class DimensionError(ShadowingError, ValueError):
    """A state or direction has the wrong length for the system."""


class IntegrationDivergedError(ShadowingError, FloatingPointError):
    """A primal or adjoint step produced non-finite values."""

    def __init__(self, step, what="state"):
        self.step = step
        self.what = what
        super().__init__(f"non-finite {what} at step {step}")


class RankDeficientError(ShadowingError, ValueError):
    def __init__(self, column, value=None, tol=None):
        self.column = column
        self.value = value
        self.tol = tol
        msg = f"numerically rank deficient at column {column}"
        if value is not None:
            msg += f" (|R_jj| = {value:.3e} <= {tol:.3e})"
        super().__init__(msg)


class SingularSystemError(ShadowingError, ValueError):
    def __init__(self, index, value=None):
        self.index = index
        self.value = value
        super().__init__(f"near-singular triangular diagonal at index {index}")


class NearEquilibriumError(ShadowingError, ValueError):
    """The flow speed at the terminal state is too small to pin the neutral component."""


class SubspaceOverflowError(ShadowingError, ValueError):
    """All tracked adjoint modes classified unstable; more modes are needed."""
