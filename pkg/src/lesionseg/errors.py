"""Exception hierarchy shared by every module."""


class LesionSegError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(LesionSegError, ValueError):
    pass


class ContractError(LesionSegError, ValueError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ContractError):
    pass


class NumericFault(LesionSegError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ParseError(LesionSegError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(LesionSegError, RuntimeError):
    pass


class TrainingFault(LesionSegError, RuntimeError):
    pass
