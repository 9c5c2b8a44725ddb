"""Exception types shared across the package."""


class FedseqError(Exception):
    """Base class for all package errors."""


class DimensionError(FedseqError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(FedseqError):
    """An operation produced or received a non-finite value."""


class StateError(FedseqError):
    """An object was used in a state that forbids the operation."""


class ParameterError(FedseqError):
    """A scalar/config parameter is outside its valid range."""


class PartitionError(FedseqError):
    """A data split or partition request cannot be satisfied."""


class ClientError(FedseqError):
    """A simulated client cannot perform the requested step."""


class SequenceError(FedseqError):
    """A sequence input is empty or malformed."""


class ProtocolError(FedseqError):
    """A server-side message or buffer violated the round protocol."""


class ConfigError(FedseqError):
    """An experiment config is invalid; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ComparisonError(FedseqError):
    """Configs passed to `compare` are not comparable."""


class DeterminismError(FedseqError):
    """A function expected to be deterministic returned differing values."""


class CheckpointError(FedseqError):
    """A checkpoint's config fingerprint does not match the loader's."""
