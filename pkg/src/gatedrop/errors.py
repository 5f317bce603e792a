"""Exception hierarchy shared by every module."""


class GateDropError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(GateDropError, ValueError):
    pass


class InvalidConfigError(GateDropError, ValueError):
    pass


class EmptyCandidateError(GateDropError, ValueError):
    """Raised when a masked selection has no admissible entry."""


class ContractViolation(GateDropError, RuntimeError):
    """A caller broke a precondition that ties two objects together."""
