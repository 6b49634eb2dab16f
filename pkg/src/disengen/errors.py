"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to.
"""


class DisengenError(Exception):
    exit_code = 1


class ConfigError(DisengenError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes do not agree."""


class RangeError(ConfigError):
    """An index (e.g. a diffusion timestep) lies outside its valid range."""


class DatasetError(ConfigError):
    """A dataset directory or manifest is malformed."""


class DependencyError(DisengenError):
    exit_code = 3


class NumericError(DisengenError, ArithmeticError):
    exit_code = 4
