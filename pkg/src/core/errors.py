class ReduxionError(Exception):
    """Base class for every error raised by the compiler kit."""


class ConfigError(ReduxionError):
    pass


# Expression engine

class ExprError(ReduxionError):
    pass


class NotInvertible(ExprError):
    pass


class UnboundVariable(ExprError):
    pass


class DomainError(ExprError):
    pass


# Loop IR

class IRError(ReduxionError):
    pass


class ParseError(IRError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(IRError):
    pass


class CyclicDataflow(IRError):
    pass


class NotInlinable(IRError):
    pass


# Scheduling

class ScheduleError(ReduxionError):
    """
    Raised by a schedule primitive.

    Args:
        reason (str): Human readable reason.
        step (str): Algorithm step that failed (``inline``, ``fuse``, ``match``, ...).
    """

    step = "schedule"

    def __init__(self, reason, step=None):
        super().__init__(reason)
        self.reason = reason
        if step is not None:
            self.step = step


class FusionIllegal(ScheduleError):
    step = "fuse"


class NoReducePredecessor(ScheduleError):
    step = "inline"


class PatternMismatch(ScheduleError):
    step = "match"


class NotCommuting(ScheduleError):
    step = "validate"


class InvalidTile(ScheduleError):
    step = "tile"


class UnknownHandle(ScheduleError):
    step = "lookup"


class RollingLoopMismatch(ScheduleError):
    step = "fuse"


# Interpreter

class InterpretError(ReduxionError):
    pass


class OutOfBounds(InterpretError):
    pass


class UninitializedRead(InterpretError):
    pass


class ShapeMismatch(InterpretError):
    pass


# Tile IR

class TileError(ReduxionError):
    pass


class IrreconcilableDims(TileError):
    pass


class NonAffine(TileError):
    pass


# Frontend

class FrontendError(ReduxionError):
    pass


class UnknownBenchmark(FrontendError):
    pass


class InvalidShape(FrontendError):
    pass


class UnboundReduceAxis(FrontendError):
    pass
