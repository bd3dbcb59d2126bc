"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command-line layer can map
failures to distinct process exit statuses.
"""


class CtxPairsError(Exception):
    exit_code = 1


class ConfigError(CtxPairsError, ValueError):
    exit_code = 2


class IngestionError(CtxPairsError, ValueError):
    exit_code = 3


class SupervisionError(CtxPairsError, ValueError):
    """Labels are required but absent or incomplete."""

    exit_code = 4


class NumericDomainError(CtxPairsError, ValueError):
    exit_code = 5


class DimensionError(CtxPairsError, ValueError):
    exit_code = 5


class ContractError(CtxPairsError, ValueError):
    exit_code = 5


class EmptyInputError(CtxPairsError, ValueError):
    exit_code = 5


class BatchSizeError(CtxPairsError, ValueError):
    exit_code = 5


class RangeError(CtxPairsError, IndexError):
    exit_code = 5


class VersionError(CtxPairsError, ValueError):
    exit_code = 6
