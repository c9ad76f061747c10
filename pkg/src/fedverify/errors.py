"""Exception types shared across the package."""


class FedVerifyError(Exception):
    """Base class for all package errors."""


class ConfigError(FedVerifyError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class NumericError(FedVerifyError, ArithmeticError):
    """A computation produced NaN/Inf."""

    def __init__(self, message, layer=None, round_index=None, participant=None):
        super().__init__(message)
        self.layer = layer
        self.round_index = round_index
        self.participant = participant


class CapabilityError(FedVerifyError):
    """Requested operation is outside what this build supports."""


class FormatError(FedVerifyError, ValueError):
    """Malformed binary input."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MarkingInfeasible(FedVerifyError):
    """The marking step could not produce a usable marker set."""


class LookupFailure(FedVerifyError, KeyError):
    """A requested round/checkpoint is not stored."""

    def __str__(self):
        return str(self.args[0]) if self.args else "lookup failed"
