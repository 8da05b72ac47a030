""" Errors raised across the package.

Each error derives from the built-in exception used for the same situation elsewhere,
so callers may catch either the specific name or the built-in.
"""


class EmptyInput(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class ShapeMismatch(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


class InvalidRecord(ValueError):
    """ A record failed signature validation. ``position`` is its 1-based id. """

    def __init__(self, position, message=None):
        self.position = position
        super().__init__(message or f"Record {position} failed signature validation.")


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class MissingPriorCommitment(RuntimeError):
    pass


class UnknownLeaf(KeyError):
    pass


class ProtocolOrderError(RuntimeError):
    pass


class RefusedDishonest(RuntimeError):
    pass


class InsufficientDeposit(ValueError):
    pass


class AlreadyJoined(RuntimeError):
    pass


class NotActive(RuntimeError):
    pass


class BadSignature(ValueError):
    pass


class NoEndorsedUpdates(RuntimeError):
    pass
