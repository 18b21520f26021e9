"""Exception hierarchy.

Each class carries an ``exit_code`` used by the command-line entry points:
2 usage, 3 config, 4 data integrity, 5 check failure.
"""


class MomeError(Exception):
    exit_code = 1
    code = "error"


class UsageError(MomeError):
    exit_code = 2
    code = "usage"


class ConfigError(MomeError, ValueError):
    exit_code = 3
    code = "config"


class StageOrderError(UsageError):
    code = "stage_order"


class DimensionError(MomeError, ValueError):
    exit_code = 3
    code = "dimension"


class ContractError(MomeError, ValueError):
    exit_code = 3
    code = "contract"


class VocabularyError(MomeError, KeyError):
    exit_code = 4
    code = "vocabulary"

    def __str__(self):
        return Exception.__str__(self)


class TargetIndexError(MomeError, IndexError):
    exit_code = 3
    code = "target_index"


class NonFiniteError(MomeError, FloatingPointError):
    exit_code = 5
    code = "non_finite"


class DataIntegrityError(MomeError):
    exit_code = 4
    code = "data_integrity"


class FormatError(DataIntegrityError):
    code = "format"


class VersionError(DataIntegrityError):
    code = "version"


class CheckFailure(MomeError):
    exit_code = 5
    code = "check_failed"
