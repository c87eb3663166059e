"""Exception hierarchy shared across the package."""


class ApgwError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(ApgwError, ValueError):
    """An argument lies outside the domain of a distribution function."""


class CurePlateauError(DomainError):
    """A probability lies beyond the cure plateau, so no finite quantile exists."""

    def __init__(self, u, limit):
        self.u = u
        self.limit = limit
        super().__init__(
            f"probability {u!r} is at or beyond the cure plateau; "
            f"quantiles exist only for u < {limit!r}"
        )


class NotCureModelError(DomainError):
    """A cure-model quantity was requested for kappa >= 0."""


class LinkOverflowError(ApgwError, OverflowError):
    """A linear predictor is too large to exponentiate safely."""

    def __init__(self, block, value, row=None):
        self.block = block
        self.value = value
        self.row = row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"link overflow in {block} block{where}: linear predictor {value!r}")


class NonFiniteLikelihoodError(ApgwError, ArithmeticError):
    """The log-likelihood contribution of some subject is not finite."""

    def __init__(self, row):
        self.row = row
        super().__init__(f"non-finite log-likelihood contribution at row {row}")


class SpecError(ApgwError, ValueError):
    """A model specification is inconsistent or malformed."""


class NoFiniteStartError(ApgwError, RuntimeError):
    """Every optimizer start produced a non-finite log-likelihood."""


class CovarianceUnavailableError(ApgwError):
    """The fit has no covariance matrix (observed information not positive definite)."""


class UnattainableCensoringError(ApgwError, ValueError):
    """The requested censoring proportion cannot be reached."""


class DataValidationError(ApgwError, ValueError):
    """An input data file failed validation."""


class ConfigError(ApgwError, ValueError):
    """A configuration key or value is invalid."""
