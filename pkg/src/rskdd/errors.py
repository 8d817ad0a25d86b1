"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class RskddError(Exception):
    exit_code = 1


class ConfigError(RskddError):
    exit_code = 2


class DataError(RskddError):
    exit_code = 3


class NumericalError(RskddError):
    exit_code = 4


class AlignmentDegenerateError(NumericalError):
    """Rigid alignment is not identifiable from the given point pairs."""


class GraphError(RskddError):
    """Misuse of the autograd tape (e.g. backward without a recorded forward)."""
