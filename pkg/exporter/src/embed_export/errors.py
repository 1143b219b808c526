class ExportError(RuntimeError):
    """Unusable job configuration or unavailable dataset/backbone."""


class VerifyError(ValueError):
    """A file fails the FSB1 layout check; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
