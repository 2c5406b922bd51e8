"""Exception hierarchy shared by every module."""


class DSCSMAError(Exception):
    """Base class for all package errors."""


class ValidationError(DSCSMAError, ValueError):
    pass


class AsymmetricMatrix(ValidationError):
    pass


class NonzeroDiagonal(ValidationError):
    pass


class NonBinaryEntry(ValidationError):
    pass


class NotPartners(ValidationError):
    pass


class InvalidProbability(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SolverFailure(DSCSMAError, RuntimeError):
    pass


class SingularSystem(SolverFailure):
    pass


class NoConvergence(SolverFailure):
    pass


class NoSignChange(SolverFailure):
    pass


class DegenerateEta(ValidationError):
    pass


class NonPositiveDiscriminant(SolverFailure):
    pass


class NoPositiveRoot(SolverFailure):
    pass


class InfeasibleTarget(ValidationError):
    pass


class EmptyFrontier(SolverFailure):
    pass


class TooLarge(ValidationError):
    pass
