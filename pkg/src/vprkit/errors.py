"""Exception types shared across the package."""


class VprError(Exception):
    """Base class for all vprkit errors."""


class StoreError(VprError):
    """Malformed or unreadable binary store file."""


class BadMagicError(StoreError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(StoreError):
    """File declares a version this reader does not support."""


class TruncatedStoreError(StoreError):
    """File ends before the payload announced in its header."""


class InvalidStoreData(StoreError):
    """Data violates the store contract (mixed dims, out-of-range positions)."""


class DataError(VprError):
    """Inputs are structurally valid but semantically unusable."""
