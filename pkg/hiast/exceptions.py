"""Exception hierarchy shared by the library and the CLI layer."""


class HiastError(Exception):
    """Root of every error raised by this package."""


class ConfigError(HiastError):
    """Invalid or unreadable configuration."""


class UsageError(HiastError):
    """Bad command-line usage."""


# ── On-disk formats ───────────────────────────────────────────────────

class FormatError(HiastError):
    """A file does not follow the expected on-disk format."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    """Array dimensions disagree with the dataset manifest."""

    def __init__(self, message: str, sample_id: str | None = None):
        super().__init__(message)
        self.sample_id = sample_id


class CheckpointError(HiastError):
    """A checkpoint is missing, corrupted or incompatible."""


# ── Numerics ──────────────────────────────────────────────────────────

class ShapeMismatchError(HiastError, ValueError):
    pass


class ClassCountMismatchError(HiastError, ValueError):
    pass


class DegenerateThresholdError(HiastError, ValueError):
    """All thresholds equal 1, so the sampling distribution is undefined."""


class NonFiniteGradientError(HiastError, FloatingPointError):
    pass


class UnlabeledDatasetError(HiastError):
    """A dataset that must carry labels has samples without them."""
