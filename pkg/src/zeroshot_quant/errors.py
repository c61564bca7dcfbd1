"""Exception hierarchy shared by every module.

Each class carries a short ``code`` used by the CLI for its one-line
machine-parsable stderr message.
"""


class QuantToolkitError(Exception):
    code = "error"


class InvalidArgument(QuantToolkitError, ValueError):
    code = "invalid-argument"


class InvalidModel(QuantToolkitError, ValueError):
    code = "invalid-model"


class UnsupportedOp(QuantToolkitError, TypeError):
    code = "unsupported-op"


class EmptyObserver(QuantToolkitError, RuntimeError):
    code = "empty-observer"


class NumericFault(QuantToolkitError, ArithmeticError):
    """A non-finite value appeared; ``where`` names the layer, op or iteration."""

    code = "numeric-fault"

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class ParseError(QuantToolkitError, ValueError):
    code = "parse-error"

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset


class UnsupportedVersion(QuantToolkitError, ValueError):
    code = "unsupported-version"
