"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller-supplied value violates an operation's precondition."""


class InvalidState(RuntimeError):
    """Data is internally inconsistent or degenerate for the requested operation."""


class FormatError(ValueError):
    """A file on disk does not follow the expected layout.

    ``kind`` names the failed check, e.g. ``"magic"``, ``"version"``, ``"length"``.
    """

    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)
