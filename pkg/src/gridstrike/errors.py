"""Exception hierarchy shared across the package."""


class GridStrikeError(Exception):
    """Base class for all package errors."""


class MalformedCase(GridStrikeError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class UnsupportedFeature(GridStrikeError):
    pass


class IslandedGrid(GridStrikeError):
    pass


class NoSlack(GridStrikeError):
    pass


class MultipleSlack(GridStrikeError):
    pass


class SchemaViolation(GridStrikeError):
    def __init__(self, message, pointer=""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class DimensionMismatch(GridStrikeError, ValueError):
    pass


class DegenerateSolution(GridStrikeError):
    """Raised when KKT sensitivities are not defined at a solution."""


class SingularJacobian(GridStrikeError):
    pass


class StalledAtZeroGradient(GridStrikeError):
    """F_L is flat at the starting attack; run the target-node variant instead."""


class InfeasibleSubproblem(GridStrikeError):
    def __init__(self, message, kappa=None, working_set=None):
        self.kappa = kappa
        self.working_set = working_set
        super().__init__(message)
