"""Exception types raised across the package."""


class ShapeMismatch(ValueError):
    pass


class AxisOutOfRange(IndexError):
    pass


class NonScalarLoss(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class NonPositiveStep(ValueError):
    pass


class EmptyHistory(ValueError):
    pass


class EmptyProblem(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


class NonFiniteCost(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class MissingPairs(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class NoPositives(LookupError):
    pass


class InvalidSpec(ValueError):
    pass


class MalformedRow(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class FieldCountMismatch(MalformedRow):
    pass


class WeightFormatError(ValueError):
    pass


class DegenerateQuaternionWarning(RuntimeWarning):
    pass
