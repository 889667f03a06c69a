"""Exception types shared across the package."""


class SpfError(Exception):
    """Base class for all package errors."""


class ShapeError(SpfError):
    """Tensor shapes incompatible with an operation. Message names both shapes."""


class GraphError(SpfError):
    """Backward invoked twice (or before forward) on the same computation."""


class ConfigError(SpfError):
    """Invalid or internally inconsistent configuration."""


class DataError(SpfError):
    """Dataset or manifest problem (empty set, missing file, bad record)."""


class GeometryError(SpfError):
    """Degenerate or out-of-bounds face geometry."""


class RegionInfeasibleError(GeometryError):
    """A candidate patch region violates bounds or exclusion zones."""

    def __init__(self, region_id, reason):
        super().__init__(f"region {region_id} infeasible: {reason}")
        self.region_id = region_id


class UndefinedMetricError(SpfError):
    """A rate was requested for an empty class; refusing to return a silent 0."""


class DivergenceError(SpfError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class AuthenticationError(SpfError):
    """AEAD tag verification failed; the payload was tampered with or the key is wrong."""


class PayloadFormatError(SpfError):
    """Ciphertext payload is structurally invalid (truncated, bad lengths)."""


class NonceReuseError(SpfError):
    """The same (key, nonce) pair was offered for encryption twice."""


class ProtocolError(SpfError):
    """Wire protocol violation."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code
