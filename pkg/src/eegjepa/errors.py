"""Exception types shared across the package."""


class EegJepaError(Exception):
    """Base class for all package errors."""


class ShapeError(EegJepaError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(EegJepaError):
    """A documented precondition was violated by the caller."""


class ConfigError(EegJepaError):
    """Invalid or inconsistent configuration."""


class IngestionError(EegJepaError):
    """A recording cannot be ingested (too short, missing channels, ...)."""


class ParseError(EegJepaError):
    """A container file is malformed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(EegJepaError):
    """Training aborted (non-finite loss or gradients)."""
