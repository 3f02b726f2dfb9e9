"""Exception types raised across the package.

Everything derives from ``RefSegError`` so callers (and the CLI) can catch one
type. Data/format problems additionally subclass ``ValueError``.
"""


class RefSegError(ValueError):
    pass


# embedding file parsing / queries
class EmptyFile(RefSegError):
    pass


class InconsistentDimension(RefSegError):
    pass


class DuplicateToken(RefSegError):
    pass


class MalformedNumber(RefSegError):
    pass


class EmptyToken(RefSegError):
    pass


class UnknownToken(RefSegError, KeyError):
    pass


class KTooLarge(RefSegError):
    pass


class LengthMismatch(RefSegError):
    pass


# shapes and dimensions
class ShapeMismatch(RefSegError):
    pass


class DimensionMismatch(RefSegError):
    pass


class ClassCountMismatch(RefSegError):
    pass


# text
class EmptyExpression(RefSegError):
    pass


class EmptyName(RefSegError):
    pass


# thresholds, labels, lists
class BadThreshold(RefSegError):
    pass


class BadLabel(RefSegError):
    pass


class BadClassIndex(RefSegError):
    pass


class EmptyList(RefSegError):
    pass


class EmptyGroundTruth(RefSegError):
    pass


# synthetic data
class PlacementFailure(RefSegError):
    pass


class NoUnambiguousReferent(RefSegError):
    pass


# files
class FormatError(RefSegError):
    """A file on disk does not follow the expected layout."""
