"""Exception types raised across the package."""


class InvStoreError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class DimensionMismatch(InvStoreError, ValueError):
    pass


class SingularKkt(InvStoreError):
    pass


class NotConverged(InvStoreError):
    pass


class DivergedLoss(InvStoreError):
    pass


class NonOptimalForward(InvStoreError):
    pass


class SchemaError(InvStoreError):
    pass


class InsufficientPrices(InvStoreError):
    pass


class NoActivationObserved(InvStoreError):
    pass


class ModelLoadError(InvStoreError):
    pass
