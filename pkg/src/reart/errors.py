"""Exception types raised across the package.

All inherit from ValueError so callers that only care about "bad input"
can catch one base class.
"""


class ReartError(ValueError):
    pass


class AngleNearPi(ReartError):
    """Rotation angle too close to pi for a unique matrix logarithm."""


class KTooLarge(ReartError):
    pass


class NoValidFlow(ReartError):
    pass


class EmptyCloud(ReartError):
    pass


class NonFiniteCost(ReartError):
    pass


class SizeMismatch(ReartError):
    pass


class DegenerateInput(ReartError):
    pass


class EmptyPart(ReartError):
    pass


class InsufficientMotion(ReartError):
    pass


class MissingGroundTruth(ReartError):
    pass


class LengthMismatch(ReartError):
    pass


class TooLarge(ReartError):
    pass


class NoConstraints(ReartError):
    pass


class NonFiniteGradient(ReartError):
    pass


class SpecInfeasible(ReartError):
    """Requested synthetic object could not be placed without overlap."""
