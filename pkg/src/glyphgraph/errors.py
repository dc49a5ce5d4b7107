"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract: usage/data problems exit 2,
verification failures exit 1, numeric divergence exits 3.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Bad configuration: unknown key, out-of-range value, empty pattern."""


class DataError(ValueError):
    """Dataset/file problem: parse failure, invariant violation, missing file."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared where finite numbers are required."""
