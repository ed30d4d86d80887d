"""Exception hierarchy shared by all sealbench modules."""


class SealError(Exception):
    """Base class for sealbench errors."""


class ParamError(SealError, ValueError):
    """A parameter is outside its allowed range."""


class SizeError(SealError, ValueError):
    """Image or matrix dimensions are incompatible with the operation."""


class DecodeError(SealError, ValueError):
    """An image file exists but cannot be decoded."""


class ConfigError(SealError, ValueError):
    """A configuration object or file is invalid."""


class RecipeParseError(SealError, ValueError):
    """Recipe text could not be parsed.

    ``position`` is a character offset for syntax errors, or a dotted path such
    as ``steps[2].kind`` for schema errors.
    """

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class ScoreParseError(SealError, ValueError):
    """A score CSV file is malformed. ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(SealError, ValueError):
    pass


class EigensolverError(SealError, RuntimeError):
    pass


class DataMismatchError(SealError, ValueError):
    """Inputs that must describe the same cases/images/metric do not."""


class MissingOutputError(DataMismatchError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(f"{c}/{i}" for c, i in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"missing SR outputs for {len(self.missing)} pairs: {shown}{more}")


class EmptyCaseError(DataMismatchError):
    pass


class DegenerateLineError(ParamError):
    """An excellence score is not strictly better than its acceptance score."""
