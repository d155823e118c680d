"""Exception hierarchy shared across the package."""


class EthodecError(Exception):
    """Base class for all package errors."""


class ValidationError(EthodecError, ValueError):
    """Bad user input: malformed config, unknown ids, inconsistent files."""


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    """An operation was called outside its documented preconditions."""


class ConfigError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class FormatError(ValidationError):
    """Binary file does not match its declared layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NonFiniteError(EthodecError, FloatingPointError):
    pass


class OracleError(EthodecError):
    pass


class TrainingError(EthodecError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class GenerationError(EthodecError):
    pass
