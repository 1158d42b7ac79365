"""Exception hierarchy shared by every module of the package."""


class PsfCenterError(Exception):
    """Base class for all errors raised by psfcenter."""


class DegenerateDirection(PsfCenterError, ValueError):
    pass


class DimensionMismatch(PsfCenterError, ValueError):
    pass


class SingularNormalMatrix(PsfCenterError, ArithmeticError):
    pass


class StepSizeNotPositive(PsfCenterError, ValueError):
    pass


class NonFiniteIterate(PsfCenterError, ArithmeticError):
    """The primal-dual iteration produced NaN or Inf.

    ``diagnostics`` carries the state at the moment of failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class NongenericTLS(PsfCenterError, ArithmeticError):
    pass


class RankDeficient(PsfCenterError, ArithmeticError):
    pass


class InsufficientReplicates(PsfCenterError, ValueError):
    pass


class BeadOutOfBounds(PsfCenterError, ValueError):
    pass


class DegenerateComponent(PsfCenterError, ValueError):
    pass


class ObservationFormatError(PsfCenterError, ValueError):
    """A malformed row in an observation CSV; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
