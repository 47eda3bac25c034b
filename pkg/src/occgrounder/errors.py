"""Exception types shared across occgrounder modules."""


class OccError(Exception):
    pass


class ConfigError(OccError, ValueError):
    """Inconsistent configuration or mismatched inputs."""


class FormatError(OccError, ValueError):
    """A binary/text file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ShapeError(OccError, ValueError):
    pass


class ContractError(OccError, ValueError):
    """A documented precondition of a loss or operator was violated."""


class FeasibilityError(OccError, ValueError):
    def __init__(self, message, deficient=None):
        self.deficient = dict(deficient or {})
        super().__init__(message)


class DivergenceError(OccError, ArithmeticError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
