"""Exception hierarchy.

Every domain failure raised by the toolkit derives from :class:`SERError`, so
callers (and the CLI, which maps them to exit code 1) can catch one type.
"""


class SERError(Exception):
    """Base class for all toolkit errors."""


# audio ingest
class MalformedHeader(SERError):
    pass


class UnsupportedEncoding(SERError):
    pass


class EmptyAudio(SERError):
    pass


class UnknownEmotionLabel(SERError):
    pass


class DuplicatePath(SERError):
    pass


class MissingColumn(SERError):
    pass


# spectrograms
class NegativeFrequency(SERError):
    pass


class DegenerateBand(SERError):
    pass


class ClipTooShort(SERError):
    pass


class NonFiniteInput(SERError):
    pass


# tensor engine / model
class ShapeMismatch(SERError):
    pass


class NonFiniteValue(SERError):
    pass


class NotScalarLoss(SERError):
    pass


class GraphConsumed(SERError):
    pass


# training
class InsufficientClassSamples(SERError):
    pass


class TooFewSamples(SERError):
    pass


class NonFiniteLoss(SERError):
    pass


class ConfigMismatch(SERError):
    pass


class CrcMismatch(SERError):
    pass


class BadMagic(SERError):
    pass


class VersionUnsupported(SERError):
    pass


# ensembles / evaluation
class EmptyEnsemble(SERError):
    pass


class LengthMismatch(SERError):
    pass


class EmptyInput(SERError):
    pass


class NoSamples(SERError):
    pass
