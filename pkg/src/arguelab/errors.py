"""Exception types raised by the public API.

Every error carries a short machine-readable ``kind`` (its class name) so the
CLI can emit single-line parseable failures.
"""


class ArgueLabError(Exception):
    """Base class for all package errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# --- numeric core ---------------------------------------------------------

class NearZeroNorm(ArgueLabError):
    pass


class DimensionMismatch(ArgueLabError):
    pass


class NonPositiveTemperature(ArgueLabError):
    pass


class IndexOutOfRange(ArgueLabError):
    pass


class NotADistribution(ArgueLabError):
    pass


class NonFiniteLoss(ArgueLabError):
    pass


# --- vocabulary / tokenizer -----------------------------------------------

class DuplicateToken(ArgueLabError):
    pass


class EmptySpec(ArgueLabError):
    pass


class UnknownToken(ArgueLabError):
    pass


class SequenceTooLong(ArgueLabError):
    pass


class EmptySequence(ArgueLabError):
    pass


# --- prompts ---------------------------------------------------------------

class PhraseLengthMismatch(ArgueLabError):
    pass


class UnknownClass(ArgueLabError):
    pass


class UnknownAttribute(ArgueLabError):
    pass


class UnknownNegative(ArgueLabError):
    pass


# --- attribute pool / sampling ---------------------------------------------

class SchemaViolation(ArgueLabError):
    pass


class DuplicateAttribute(ArgueLabError):
    pass


class EmptyClass(ArgueLabError):
    pass


class TooFewPoints(ArgueLabError):
    pass


class NoImages(ArgueLabError):
    pass


# --- losses ----------------------------------------------------------------

class EmptyAttributeSet(ArgueLabError):
    pass


class EmptyTextualSet(ArgueLabError):
    pass


class NegativeWeight(ArgueLabError):
    pass


# --- training / evaluation --------------------------------------------------

class NonFiniteGradient(ArgueLabError):
    pass


class EmptyTask(ArgueLabError):
    pass


class DivergedLoss(ArgueLabError):
    pass


class UnknownSplit(ArgueLabError):
    pass


class UnknownParameter(ArgueLabError):
    pass


# --- synthetic benchmark -----------------------------------------------------

class InvalidSpec(ArgueLabError):
    pass


class UnknownKind(ArgueLabError):
    pass


# --- files -------------------------------------------------------------------

class VersionMismatch(ArgueLabError):
    pass


class VocabularyHashMismatch(ArgueLabError):
    pass
