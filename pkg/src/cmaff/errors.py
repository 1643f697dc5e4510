"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands or buffers with inconsistent dimensions."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Inconsistent or incomplete configuration."""


class FormatError(ValueError):
    """Malformed binary file content."""


class ParseError(ValueError):
    """Malformed text input, with a 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateBoxError(ValueError):
    """Box geometry with zero extent along an axis."""


class AlignmentError(ValueError):
    """RGB and IR planes of a pair disagree in spatial size."""
