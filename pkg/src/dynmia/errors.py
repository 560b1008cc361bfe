"""Exception hierarchy shared across the toolkit."""


class DynMIAError(Exception):
    """Base class for every error raised by dynmia."""


class InvalidSpec(DynMIAError, ValueError):
    pass


class BudgetExceeded(DynMIAError, ValueError):
    pass


class DatasetNotFound(DynMIAError, FileNotFoundError):
    pass


class CorruptData(DynMIAError):
    pass


class ShapeMismatch(DynMIAError, ValueError):
    pass


class GateCountMismatch(ShapeMismatch):
    pass


class DivergedTraining(DynMIAError, RuntimeError):
    pass


class FrozenViolation(DynMIAError, RuntimeError):
    pass


class EmptySet(DynMIAError, ValueError):
    pass


class MissingLabels(DynMIAError, ValueError):
    pass


class VersionMismatch(DynMIAError):
    pass


class CorruptRecord(DynMIAError):
    pass


class DimensionMismatch(DynMIAError, ValueError):
    pass


class SingleClassData(DynMIAError, ValueError):
    pass


class MissingFeature(DynMIAError, ValueError):
    pass


class UnbalancedInput(DynMIAError, ValueError):
    pass


class MissingArtifact(DynMIAError):
    pass


class ConfigFingerprintMismatch(DynMIAError):
    pass


class ExperimentLocked(DynMIAError):
    pass
