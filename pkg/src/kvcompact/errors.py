"""Exception hierarchy shared by every subpackage."""


class KVCompactError(Exception):
    pass


class InvalidInputError(KVCompactError, ValueError):
    """Malformed or non-finite numerical input."""


class InvalidStateError(KVCompactError, RuntimeError):
    """An operation referenced state that is not tracked (unknown token, head, request)."""


class OutOfMemoryError(KVCompactError):
    """Recoverable: the free page list cannot satisfy a step's demand.

    Raised before any state is mutated, so the caller may defer the batch and retry.
    """

    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} pages but only {available} are free")
        self.requested = requested
        self.available = available


class OwnershipError(KVCompactError):
    """A head tried to free a page it does not own."""


class TableOverflowError(KVCompactError):
    """High and low sides of a bidirectional page table collided."""


class TraceError(KVCompactError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class ConfigError(KVCompactError):
    pass


class SchemaVersionError(KVCompactError):
    pass
