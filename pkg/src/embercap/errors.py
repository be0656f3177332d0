class EmbercapError(Exception):
    """Base class for all errors raised by the package."""


class ParseError(EmbercapError, ValueError):
    """Malformed input file. ``lineno`` is 1-based, or None when not line-specific."""

    def __init__(self, message, lineno=None, source=None):
        self.message = message
        self.lineno = lineno
        self.source = source
        prefix = ""
        if source:
            prefix += f"{source}:"
        if lineno is not None:
            prefix += f"line {lineno}: "
        elif prefix:
            prefix += " "
        super().__init__(prefix + message)


class ValidationError(EmbercapError, ValueError):
    pass


class ConvergenceError(EmbercapError, RuntimeError):
    pass
