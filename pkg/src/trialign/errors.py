"""Exception types raised across the package."""


class TrialignError(Exception):
    """Base class for all package errors."""


class ValidationError(TrialignError, ValueError):
    """Bad input detected before any work was done."""


class ShapeMismatch(ValidationError):
    pass


class NonFiniteError(TrialignError, FloatingPointError):
    pass


class DegenerateEmbedding(TrialignError, ArithmeticError):
    pass


class NonScalarLoss(ValidationError):
    pass


class GraphAlreadyConsumed(TrialignError, RuntimeError):
    pass


class EmptyCloud(ValidationError):
    pass


class UnknownCategory(ValidationError):
    pass


class BadArchitecture(ValidationError):
    pass


class RaggedBatch(ValidationError):
    pass


class EmptyWord(ValidationError):
    pass


class NoCandidates(ValidationError):
    pass


class FormatError(TrialignError, ValueError):
    """A binary or text file does not follow its declared layout."""


class BadMagic(FormatError):
    pass


class DimMismatch(FormatError, ValidationError):
    pass


class TruncatedFile(FormatError):
    pass


class BadHeader(FormatError):
    pass


class UnnormalizedCloud(ValidationError):
    pass


class ResolutionMismatch(ValidationError):
    pass


class NonUnitRows(ValidationError):
    pass


class MissingModality(TrialignError, KeyError):
    pass


class DivergedLoss(TrialignError, FloatingPointError):
    pass


class EmptySplit(ValidationError):
    pass


class UnknownSetName(ValidationError):
    pass


class LabelGap(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyGallery(ValidationError):
    pass


class FractionTooSmall(ValidationError):
    pass


class UnknownCommand(ValidationError):
    pass


class BadFlag(ValidationError):
    pass
