"""Exception hierarchy shared by all modules."""


class SurflabError(Exception):
    """Base class for all library errors."""


class InputError(SurflabError, ValueError):
    """Malformed user input (bad periods, bad config, corrupt files)."""


class NumericalError(SurflabError, ArithmeticError):
    """A numerical procedure could not certify its result."""


# sp2index
class DegenerateEndpoint(NumericalError):
    pass


class InsufficientSampling(NumericalError):
    pass


class NotAFixedPoint(NumericalError):
    pass


# novikov
class FloorExhausted(NumericalError):
    pass


# localfields
class TolTooCoarse(NumericalError):
    pass


class ZeroOnContour(NumericalError):
    pass


class AngleJump(NumericalError):
    pass


class GeometryViolation(SurflabError):
    pass


# atlas
class FieldMismatch(SurflabError):
    pass


class CrowdedDisc(SurflabError):
    pass


class NotVanishingAtOrigin(InputError):
    pass


# dynamics
class StuckAtBoundary(NumericalError):
    pass


class LeftAtlas(SurflabError):
    pass


class HorizonExceeded(NumericalError):
    pass
