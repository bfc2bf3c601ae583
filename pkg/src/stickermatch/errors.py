"""Exception hierarchy shared across the package."""


class StickerMatchError(Exception):
    """Base class for all package errors."""


class DimensionError(StickerMatchError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(StickerMatchError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(ValidationError):
    """Input is numerically degenerate (e.g. a zero vector where a direction is needed)."""


class ConfigError(StickerMatchError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class DatasetFormatError(StickerMatchError, ValueError):
    """A dataset file does not match the line schema."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NonFiniteLossError(StickerMatchError, FloatingPointError):
    """A loss component evaluated to NaN or Inf."""

    def __init__(self, component: str, value: float):
        self.component = component
        self.value = value
        super().__init__(f"loss component {component!r} is not finite ({value})")
