"""Exception types shared across the package.

The CLI maps these onto exit codes: contract/validation failures exit 1,
IO/parse failures exit 2.
"""


class ShapeError(ValueError):
    """Array shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. a zero-norm embedding row)."""


class ParseError(ValueError):
    """A file or record could not be parsed."""


class TrainingDivergedError(RuntimeError):
    """A loss component became NaN or infinite during training."""
