"""Exception hierarchy shared by all modules."""


class OasisError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    #: module that raised, used for qualified CLI messages
    module = "oasis"


class ParameterError(OasisError, ValueError):
    module = "parameters"


class IoError(OasisError, OSError):
    module = "io"


class ParseError(OasisError, ValueError):
    module = "io"

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class InputError(OasisError, ValueError):
    module = "input"


class DesignError(OasisError):
    module = "oas-design"


class DegenerateScoreError(OasisError, ValueError):
    module = "oas-design"


class DivisionByZeroError(OasisError, ZeroDivisionError):
    module = "oas-design"

    def __init__(self, message, consumers=()):
        self.consumers = list(consumers)
        super().__init__(message)


class DegenerateDensityError(OasisError, ValueError):
    module = "isa-estimator"


class InsufficientOverlapError(OasisError, ValueError):
    module = "isa-estimator"


class EstimationError(OasisError):
    module = "isa-estimator"


class NoDataError(OasisError, ValueError):
    module = "report"
