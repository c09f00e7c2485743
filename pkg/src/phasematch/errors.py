"""Exception hierarchy shared by all phasematch modules."""


class PhaseMatchError(Exception):
    """Base class for every error raised by the package."""


class InputError(PhaseMatchError):
    """Bad user input: missing files, malformed formats, invalid parameters."""


class PipelineError(PhaseMatchError):
    """A processing stage could not produce a result."""


# imaging
class UnsupportedFormat(InputError):
    pass


class CorruptHeader(InputError):
    pass


class IoFailure(InputError):
    pass


class OutOfBounds(PhaseMatchError, IndexError):
    pass


# pc_detector
class SignalTooShort(InputError):
    pass


class InvalidBankParams(InputError):
    pass


class DimensionMismatch(InputError):
    pass


# convnet
class ShapeMismatch(InputError):
    pass


class LengthMismatch(InputError):
    pass


class EmptyDataset(InputError):
    pass


class VersionMismatch(InputError):
    pass


class ChecksumMismatch(InputError):
    pass


# dataset
class NoValidWindows(PipelineError):
    pass


class CannotDerange(InputError):
    pass


class BadRatios(InputError):
    pass


class InvalidSynthParams(InputError):
    pass


# matcher
class ModelShapeMismatch(ShapeMismatch):
    pass


class InsufficientMatches(PipelineError):
    pass


class NoConsensus(PipelineError):
    pass


class NoKeypoints(PipelineError):
    pass


class MissingGroundTruth(InputError):
    pass
