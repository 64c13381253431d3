"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or extents do not satisfy an operation's contract."""


class ContractError(ValueError):
    """A precondition other than a shape constraint was violated."""


class ConfigurationError(ValueError):
    """A configuration value is invalid (head counts, widths, axes, ...)."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries to normalize over."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


class GenerationError(RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
