"""Exception hierarchy shared by every module."""


class NMNetError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateFrame(NMNetError):
    pass


class ProjectionAtInfinity(NMNetError):
    pass


class DegenerateEpipolar(NMNetError):
    pass


class InsufficientCorrespondences(NMNetError):
    pass


class EmptyBucket(NMNetError):
    pass


class NoInliers(NMNetError):
    pass


class GenerationFailed(NMNetError):
    pass


class ParseError(NMNetError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VersionError(NMNetError):
    pass


class ShapeError(NMNetError):
    pass


class EmptyDataset(NMNetError):
    pass


class DegenerateConfiguration(NMNetError):
    pass


class NoConsensus(NMNetError):
    pass


class EmptyInput(NMNetError):
    pass


class ConfigError(NMNetError):
    """Inconsistent run configuration (e.g. checkpoint vs. flags)."""
