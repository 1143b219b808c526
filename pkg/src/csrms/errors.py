"""Shared exception types."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the mathematical domain of the operation."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class SamplerError(ValueError):
    """No candidate satisfies the sampling definition anywhere in the dataset."""


class FormatError(ValueError):
    """A file does not conform to the FSB1 layout.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
