"""Exception hierarchy shared by every asdscreen module.

The CLI maps :class:`ViolationError` subclasses to exit code 2 and every other
:class:`AsdScreenError` to exit code 1.
"""


class AsdScreenError(Exception):
    """Base class for all errors raised by asdscreen."""


class ConfigError(AsdScreenError, ValueError):
    pass


class StructureError(AsdScreenError):
    """Corpus layout does not match the expected class/subject structure."""


class ParseError(AsdScreenError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateGeometryError(AsdScreenError, ValueError):
    pass


class DomainError(AsdScreenError, ValueError):
    pass


class ShapeError(AsdScreenError, ValueError):
    pass


class NumericError(AsdScreenError, ArithmeticError):
    pass


class PolicyError(AsdScreenError):
    pass


class MissingWeightsError(AsdScreenError, FileNotFoundError):
    pass


class SchemaError(AsdScreenError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class AuthenticationError(AsdScreenError):
    pass


class IntegrityError(AsdScreenError):
    pass


class ViolationError(AsdScreenError):
    """Result-level failure (undefined metric, audit violation); exit code 2."""


class UndefinedMetricError(ViolationError, ArithmeticError):
    def __init__(self, metric, reason=""):
        msg = f"{metric} is undefined"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.metric = metric
