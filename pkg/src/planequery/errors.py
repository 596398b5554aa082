"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class PlaneQueryError(Exception):
    exit_code = 1


class ShapeError(PlaneQueryError, ValueError):
    exit_code = 4


class DomainError(PlaneQueryError, ValueError):
    exit_code = 4


class NumericError(PlaneQueryError, ArithmeticError):
    exit_code = 4


class ContractError(PlaneQueryError, ValueError):
    exit_code = 4


class DegeneratePlaneError(PlaneQueryError, ValueError):
    exit_code = 4


class InvalidRayError(PlaneQueryError, ValueError):
    exit_code = 4


class GenerationError(PlaneQueryError, RuntimeError):
    exit_code = 4


class ConfigError(PlaneQueryError, ValueError):
    exit_code = 2


class TensorFileError(PlaneQueryError, OSError):
    exit_code = 3


class CheckpointError(PlaneQueryError, OSError):
    exit_code = 3
