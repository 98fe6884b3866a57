"""Exception types shared across the package."""


class RomLabError(Exception):
    """Base class for all rom-lab errors."""


class EmptyInputError(RomLabError):
    """An operation received an empty corpus, sequence, or record stream."""


class InvalidConfigError(RomLabError):
    """A configuration value violates its contract (bad sizes, rates, keys)."""


class ConfigError(RomLabError):
    """A run configuration is inconsistent with the data it refers to."""


class InvalidInputError(RomLabError):
    """An input value is out of its legal domain (negative weight, bad id)."""


class SchemaError(RomLabError):
    """A file or record does not match its declared schema."""


class ContractViolationError(RomLabError):
    """An internal precondition was broken by the caller."""


class NumericError(RomLabError):
    """A non-finite value appeared where finite numbers are required."""


class CorruptCheckpointError(RomLabError):
    """Checkpoint payload does not match its header."""


class CheckpointVersionError(RomLabError):
    """Checkpoint was written by an unknown format version."""
