"""Exception hierarchy.

Each category carries a distinct process exit code so the CLI can report
failures without a traceback.
"""


class FewMaxError(Exception):
    exit_code = 1


class LoadError(FewMaxError):
    exit_code = 2


class SchemaError(FewMaxError):
    exit_code = 3


class DataError(FewMaxError):
    exit_code = 4


class CapacityError(FewMaxError):
    exit_code = 5


class ParameterError(FewMaxError, ValueError):
    exit_code = 6


class DimensionError(FewMaxError, ValueError):
    exit_code = 7


class DivergenceError(FewMaxError):
    """Raised when a training loss becomes non-finite or exceeds the guard."""

    exit_code = 8

    def __init__(self, message, batch_index=None, components=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.components = components or {}


class ConfigError(FewMaxError):
    exit_code = 9


class CheckpointError(FewMaxError):
    exit_code = 10


class CheckpointVersionError(CheckpointError):
    exit_code = 11


class SingularityError(FewMaxError):
    exit_code = 12


class LabelCoverageError(FewMaxError):
    exit_code = 13


class StateError(FewMaxError):
    exit_code = 14
