"""Exception types shared across the package."""


class DataError(ValueError):
    """Input files or annotations are malformed or inconsistent."""


class FormatError(DataError):
    """A file does not follow its expected line grammar."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ModelVersionError(DataError):
    def __init__(self, expected, found):
        super().__init__(f"model format version mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class NumericalError(ArithmeticError):
    """Training produced a non-finite or diverging quantity."""
