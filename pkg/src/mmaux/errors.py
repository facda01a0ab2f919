"""Exception types shared across the package."""


class MMAuxError(Exception):
    pass


class ConfigError(MMAuxError, ValueError):
    """Invalid configuration (bad ratios, out-of-range hyperparameters, ...)."""


class InputError(MMAuxError, ValueError):
    """Malformed input data (out-of-vocab ids, wrong widths, bad labels)."""


class DimensionError(InputError):
    pass


class NumericDegeneracyError(MMAuxError, ArithmeticError):
    pass


class DegenerateBatchError(MMAuxError, ValueError):
    """Batch too small for an in-batch objective (ITC/ITM need N >= 2)."""


class DegenerateTestError(MMAuxError, ValueError):
    pass


class GradCheckError(MMAuxError, ArithmeticError):
    pass


class ParseError(MMAuxError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
