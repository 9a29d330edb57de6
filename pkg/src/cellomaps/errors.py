"""Exception hierarchy.

Everything raised for bad user input derives from :class:`CellOMapsError`;
the CLI maps those to exit code 1 and :class:`InvariantViolation` to 2.
"""


class CellOMapsError(ValueError):
    pass


class InvariantViolation(AssertionError):
    """An internal consistency check failed; this is a bug, not bad input."""


# ingest
class MalformedInput(CellOMapsError):
    pass


class OutOfBounds(CellOMapsError):
    pass


class UnknownClass(CellOMapsError):
    pass


class ConflictingRules(CellOMapsError):
    pass


class InvalidScale(CellOMapsError):
    pass


# codec
class BadMagic(CellOMapsError):
    pass


class UnsupportedVersion(CellOMapsError):
    pass


class TruncatedPayload(CellOMapsError):
    pass


class NonzeroPadding(CellOMapsError):
    pass


class TooManyChannels(CellOMapsError):
    pass


class EmptyTile(CellOMapsError):
    pass


# tiler
class TileTooLarge(CellOMapsError):
    pass


# classifier
class OddTileSide(CellOMapsError):
    pass


class ShapeMismatch(CellOMapsError):
    pass


class EmptyDataset(CellOMapsError):
    pass


class DegenerateProbabilityWarning(RuntimeWarning):
    """The true-class probability was 0 and got clamped before the log."""


# evaluation
class InsufficientPatients(CellOMapsError):
    pass


class StratificationFailed(CellOMapsError):
    pass


class LengthMismatch(CellOMapsError):
    pass


class EmptyInput(CellOMapsError):
    pass


# projection / tmb
class OffGridOrigin(CellOMapsError):
    pass


class DuplicateCoordinate(CellOMapsError):
    pass


class SingleClassDataset(CellOMapsError):
    pass


class EmptyGraph(CellOMapsError):
    pass
