"""Exception hierarchy shared by every module."""


class ZODSError(Exception):
    """Base class for all library errors."""


class ShapeError(ZODSError, ValueError):
    pass


class ArgumentError(ZODSError, ValueError):
    pass


class StateError(ZODSError, RuntimeError):
    pass


class NumericalError(ZODSError, ArithmeticError):
    pass


class ContractError(ZODSError):
    """A black-box or freeze contract was violated."""


class BlackBoxAccessError(ContractError, AttributeError):
    pass


class TrainingError(ZODSError, RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FormatError(ZODSError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ZODSError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingArtifactError(ZODSError, FileNotFoundError):
    pass
