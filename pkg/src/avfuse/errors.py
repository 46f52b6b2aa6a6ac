"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class DivisionHazardError(ArithmeticError):
    """A normalisation would divide by zero."""


class NonFiniteError(ArithmeticError):
    """A loss or gradient became NaN or infinite."""


class ChecksumError(ValueError):
    """Checkpoint payload does not match its recorded checksum."""
