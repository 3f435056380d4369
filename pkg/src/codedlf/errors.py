"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward from a non-scalar
    without an explicit seed gradient)."""


class NumericError(ArithmeticError):
    """A numeric invariant failed: NaN/Inf appeared in a forward pass,
    a gradient, or an optimizer step."""


class FormatError(ValueError):
    """A file does not conform to one of the binary container formats."""
