"""Exception types shared across the package.

Error classes are part of the public contract: the CLI maps them onto exit
codes, and callers can catch the narrow type they care about.
"""


class ProtosegError(Exception):
    """Base class for all package errors."""


class DataError(ProtosegError):
    """Base for dataset / case-level problems (CLI exit code 2)."""


class MissingModality(DataError):
    def __init__(self, modality, path=None):
        self.modality = modality
        suffix = f" under {path}" if path else ""
        super().__init__(f"no volume file found for modality '{modality}'{suffix}")


class ShapeMismatch(DataError):
    """Volumes of one case disagree in dimensions."""


class LabelDomainError(DataError):
    """Label volume contains a value outside the expected set."""


class EmptyBrainMask(DataError):
    """A modality has no voxels inside the brain mask."""


class CropTooLarge(DataError):
    """Requested crop exceeds the volume dimensions."""


class InvalidSpec(DataError):
    """Phantom specification violates its invariants."""


class ShapeError(ProtosegError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ProtosegError):
    """Configuration values are inconsistent or out of range."""


class ArityError(ProtosegError):
    """Wrong number of inputs for a fixed-arity operation."""


class LevelError(ProtosegError):
    """Operation requested at an encoder/decoder level it does not support."""


class NormalizationError(ProtosegError):
    """A probability field does not sum to one per voxel."""


class RangeError(ProtosegError):
    """Scalar argument outside its valid range."""


class NonFiniteLoss(ProtosegError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}; state preserved")


class CheckpointError(ProtosegError):
    """Checkpoint file unreadable or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class ConfigMismatch(CheckpointError):
    """Checkpoint config fingerprint does not match the running config."""


class VerificationFailure(ProtosegError):
    """One or more verification suites failed (CLI exit code 3)."""
