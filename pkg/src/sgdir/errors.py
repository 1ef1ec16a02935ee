"""Exception types shared across the package."""


class SgdirError(Exception):
    pass


class InvalidCoordinate(SgdirError, ValueError):
    pass


class GeometryMismatch(SgdirError, ValueError):
    pass


class UnsupportedOp(SgdirError, ValueError):
    pass


class ShapeError(SgdirError, ValueError):
    pass


class NotScalar(SgdirError, ValueError):
    pass


class TimeOutOfRange(SgdirError, ValueError):
    pass


class NonDivisibleDims(SgdirError, ValueError):
    pass


class WindowTooLarge(SgdirError, ValueError):
    pass


class EmptyStructure(SgdirError, ValueError):
    pass


class LengthMismatch(SgdirError, ValueError):
    pass


class NonFiniteLoss(SgdirError, ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class UnsupportedCheckpoint(SgdirError, ValueError):
    pass


class CodecError(SgdirError, ValueError):
    pass


class ConfigError(SgdirError, ValueError):
    pass
