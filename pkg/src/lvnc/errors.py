"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor or mask shapes are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class FormatError(ValueError):
    """Raised for malformed raster, manifest or checkpoint files."""


class UndefinedPTAError(ValueError):
    """Raised when a slice has no myocardium, so TA + ELA = 0."""
