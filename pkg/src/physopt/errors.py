"""Exception hierarchy shared by every module."""


class PhysoptError(Exception):
    """Base class for all library errors."""


class InvalidSpecError(PhysoptError, ValueError):
    pass


class OutOfDomainError(PhysoptError, ValueError):
    pass


class ShapeMismatchError(PhysoptError, ValueError):
    pass


class UnsupportedFamilyError(PhysoptError, ValueError):
    pass


class DivergenceError(PhysoptError, ArithmeticError):
    """A residual, update or iterate became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DatasetFormatError(PhysoptError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class GenerationError(PhysoptError, RuntimeError):
    pass


class ConfigError(PhysoptError, ValueError):
    pass


class CheckpointError(PhysoptError, ValueError):
    pass
