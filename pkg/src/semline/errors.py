"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class SemlineError(Exception):
    exit_code = 1


class ValidationError(SemlineError, ValueError):
    """A line, annotation or grid violates its invariants."""

    exit_code = 3


class DegenerateLineError(ValidationError):
    pass


class EmptyCandidatesError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class DegenerateRegionError(ValidationError):
    """Region pooling found no pixels on one side of the line."""


class ParseError(ValidationError):
    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno
        self.path = path


class ConfigError(SemlineError, ValueError):
    exit_code = 4


class NumericError(SemlineError, ArithmeticError):
    exit_code = 5


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch
