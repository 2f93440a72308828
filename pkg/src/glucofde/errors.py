"""Exception hierarchy shared by the pipeline modules."""


class GlucoFdeError(Exception):
    """Base class for all package errors."""


class SchemaError(GlucoFdeError):
    pass


class DataError(GlucoFdeError):
    pass


class ConfigError(GlucoFdeError):
    pass


class DomainError(GlucoFdeError, ValueError):
    pass


class GrammarError(GlucoFdeError):
    """Raised by the BNF parser; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ExpressionSyntaxError(GlucoFdeError, ValueError):
    pass


class EvaluationError(GlucoFdeError, ArithmeticError):
    pass


class NumericalError(GlucoFdeError, ArithmeticError):
    pass


class EmptyClusterError(DomainError):
    pass


class DependencyError(GlucoFdeError):
    """An upstream pipeline artifact is missing."""

    def __init__(self, message, command=None):
        self.command = command
        super().__init__(message)
