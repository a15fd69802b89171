"""Exception types raised across the package.

Each carries a short machine-readable ``code`` used by the CLI when it
reports a failure on its last output line.
"""


class KFOError(Exception):
    code = "KFO_ERROR"


class NotSymmetric(KFOError, ValueError):
    code = "NOT_SYMMETRIC"


class IndefiniteInput(KFOError, ValueError):
    code = "INDEFINITE_INPUT"


class RankTooLarge(KFOError, ValueError):
    code = "RANK_TOO_LARGE"


class DimensionMismatch(KFOError, ValueError):
    code = "DIMENSION_MISMATCH"


class RankBudgetExceeded(KFOError, ValueError):
    code = "RANK_BUDGET_EXCEEDED"


class InvalidCorrectionSize(KFOError, ValueError):
    code = "INVALID_CORRECTION_SIZE"


class ZeroSpectrum(KFOError, ValueError):
    code = "ZERO_SPECTRUM"


class ZeroReference(KFOError, ValueError):
    code = "ZERO_REFERENCE"


class MalformedFile(KFOError, ValueError):
    code = "MALFORMED_FILE"

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(KFOError, ValueError):
    code = "CONFIG_ERROR"

    def __init__(self, message, field=None):
        text = f"{field}: {message}" if field else message
        super().__init__(text)
        self.field = field
