"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class StedmError(Exception):
    exit_code = 5


class ParameterError(StedmError, ValueError):
    exit_code = 3


class ShapeError(StedmError, ValueError):
    exit_code = 3


class ConfigError(StedmError, ValueError):
    exit_code = 3


class DataError(StedmError):
    exit_code = 4


class SamplingError(StedmError):
    exit_code = 4
