"""Exception hierarchy shared by every ntrflab module.

Each class carries the CLI exit code it maps to, so the command-line layer
never has to enumerate them.
"""


class NtrfLabError(Exception):
    exit_code = 1


class InvalidInputError(NtrfLabError, ValueError):
    """Rejected input: bad shapes, out-of-range parameters, malformed files."""

    exit_code = 2


class DataFormatError(InvalidInputError):
    """A data file could not be parsed; ``line`` or ``index`` locate the fault."""

    def __init__(self, message, line=None, index=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if index is not None:
            where.append(f"row index {index}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.index = index


class DegenerateFeatureError(InvalidInputError):
    pass


class UndefinedPhiError(InvalidInputError):
    pass


class EmptySurvivorError(InvalidInputError):
    pass


class MissingSnapshotError(InvalidInputError):
    pass


class BudgetExceededError(NtrfLabError):
    """A sampler or search ran out of its rejection / iteration budget."""

    exit_code = 3


class DivergenceError(NtrfLabError):
    """Training produced non-finite values or a runaway loss."""

    exit_code = 3

    def __init__(self, message, last_valid_step=None, diagnostics=None):
        super().__init__(message)
        self.last_valid_step = last_valid_step
        self.diagnostics = diagnostics or {}


class StepSizeError(DivergenceError):
    pass
