"""Exception types raised across the package."""


class RaceGameError(Exception):
    """Base class; the CLI maps subclasses of ValidationError to exit code 2."""


class ValidationError(RaceGameError, ValueError):
    """Input violates a documented invariant."""


class TooFewSamples(ValidationError):
    pass


class DegenerateGeometry(ValidationError):
    pass


class OutsideFrenetDomain(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class TrackTooNarrow(ValidationError):
    pass


class FrictionOutOfRange(ValidationError):
    pass


class SingularFrenet(RaceGameError, ArithmeticError):
    pass


class NonFiniteObjective(RaceGameError, ArithmeticError):
    pass


class StartSamplingFailed(RaceGameError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class EmptySamples(ValidationError):
    pass


class DegenerateRange(ValidationError):
    pass
