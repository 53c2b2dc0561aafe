"""Exception hierarchy shared by all modules."""


class EMMError(Exception):
    """Base class for every error raised by this package."""


# -- tree validation ---------------------------------------------------------

class TreeError(EMMError, ValueError):
    """Invalid scenario tree description; ``node`` names the offender."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class NonPositiveProbability(TreeError):
    pass


class ChildrenSumNotOne(TreeError):
    pass


class RaggedLeaves(TreeError):
    pass


class OrphanNode(TreeError):
    pass


class RootError(TreeError):
    pass


# -- filtration operations ---------------------------------------------------

class TimeOutOfRange(EMMError, IndexError):
    pass


class NegativeInput(EMMError, ValueError):
    pass


class InvalidDensity(EMMError, ValueError):
    pass


class MeanNotOne(InvalidDensity):
    pass


class InvalidStoppingTime(EMMError, ValueError):
    pass


# -- martingale analysis -----------------------------------------------------

class NotLocalizing(EMMError):
    """A localization sequence failed; ``location`` is ``(n, t, atom)`` or ``(n, None, None)``."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class NotLocalMartingaleInput(EMMError, ValueError):
    pass


# -- construction ------------------------------------------------------------

class ConstructionError(EMMError):
    """Raised when a one-step density cannot be built; ``atom`` names the atom."""

    def __init__(self, message, atom=None):
        super().__init__(message)
        self.atom = atom


class NoFeasibleK(ConstructionError):
    pass


class BoundaryMinimizer(ConstructionError):
    pass


class MaxIterations(ConstructionError):
    pass


class InvalidProblem(EMMError, ValueError):
    pass


class NonPositiveEpsilon(EMMError, ValueError):
    pass


class PostconditionFailed(EMMError):
    pass


class ProbBoundViolated(PostconditionFailed):
    pass


class InvalidGrid(EMMError, ValueError):
    pass
