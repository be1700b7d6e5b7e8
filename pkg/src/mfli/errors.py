"""Exception types shared across the package."""


class MFLIError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MFLIError, ValueError):
    """Invalid configuration (zero counts, out-of-range probabilities, ...)."""


class NumericError(MFLIError, ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class ConsistencyError(MFLIError):
    """Paired structures disagree (e.g. delta snapshot not matching its full)."""


class EmptyTriggerError(MFLIError):
    """A retrieval request had no usable trigger after unknown-id filtering."""


class StageError(MFLIError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class SnapshotFormatError(MFLIError):
    """Base class for snapshot decode failures."""


class BadMagicError(SnapshotFormatError):
    pass


class UnsupportedVersionError(SnapshotFormatError):
    pass


class TruncatedSnapshotError(SnapshotFormatError):
    pass


class ChecksumError(SnapshotFormatError):
    pass
