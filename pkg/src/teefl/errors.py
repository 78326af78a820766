"""Exception hierarchy shared by every teefl module."""

from __future__ import annotations


class TeeflError(Exception):
    """Base class; ``module`` names the component that raised."""

    module = "teefl"


class InvalidInputError(TeeflError, ValueError):
    module = "params"


class ShapeError(TeeflError, ValueError):
    module = "params"


class ConfigurationError(TeeflError, ValueError):
    module = "config"

    def __init__(self, message: str, errors: list[str] | None = None):
        super().__init__(message)
        self.errors = errors or [message]


class LifecycleError(TeeflError, RuntimeError):
    module = "enclave"


class ForbiddenOperationError(TeeflError, RuntimeError):
    module = "enclave"


class EnvelopeKeyError(TeeflError, ValueError):
    module = "envelope"


class TamperError(TeeflError):
    module = "envelope"


class StaleUpdateError(TeeflError):
    module = "envelope"


class AggregationError(TeeflError, ValueError):
    module = "robust_agg"


class InsufficientQuorumError(TeeflError, RuntimeError):
    module = "protocol"


class PlaintextLeakError(TeeflError, RuntimeError):
    module = "protocol"
