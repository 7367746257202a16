class ConfigurationError(ValueError):
    """Invalid configuration value or incompatible parameter set."""


class ContractError(ValueError):
    """Arguments violate an operation's preconditions (shapes, ranges)."""


class ParseError(ValueError):
    """Malformed input file. Carries the 1-based line (and column if known)."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "")
            message = f"{where}: {message}"
        super().__init__(message)


class EvaluationFault(RuntimeError):
    """Non-finite values appeared during a network evaluation or sampling."""


class TrainingFault(RuntimeError):
    def __init__(self, message, batch_index=None, step=None):
        self.batch_index = batch_index
        self.step = step
        super().__init__(message)


class DataError(RuntimeError):
    """Input data cannot be used (missing pairs, length mismatch, ...)."""
