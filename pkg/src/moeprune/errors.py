"""Exception taxonomy shared by every module.

CLI exit-code mapping: UsageError -> 2, input/format/contract/shape/storage
errors -> 3, NumericalError -> 4.
"""


class MoePruneError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MoePruneError):
    """Operand shapes or architectures are incompatible."""


class ConfigError(MoePruneError):
    """A configuration value violates its invariants."""


class InputError(MoePruneError):
    """User-supplied data (corpus, tokens, targets) is invalid."""


class FormatError(MoePruneError):
    """A persisted file is malformed, truncated, or unreadable."""


class ChecksumError(FormatError):
    """Stored checksum does not match the file contents."""


class VersionError(FormatError):
    """File format version is not supported."""


class MaskConsistencyError(FormatError):
    """A mask marks a weight as pruned but the stored weight is nonzero."""


class ContractError(MoePruneError):
    """Caller violated an API contract (mismatched stats, targets, models)."""


class NumericalError(MoePruneError):
    """A numerical procedure failed (non-PD matrix, NaN loss, overflow)."""


class StorageError(MoePruneError):
    """An I/O operation failed."""


class UsageError(MoePruneError):
    """Invalid command-line flag combination."""
