"""Exception types shared across the package."""


class BiasLensError(Exception):
    """Base class for all package errors."""


class ShapeError(BiasLensError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(BiasLensError):
    """A NaN or Inf appeared where only finite values are allowed."""


class GraphError(BiasLensError):
    """Misuse of an autodiff graph (reused after backward, non-scalar loss)."""


class StyleRangeError(BiasLensError):
    """A style-map parameter is outside its documented range."""


class UnknownDatasetError(BiasLensError):
    """A dataset label or name is not present in the registry."""


class ActNormStateError(BiasLensError):
    """ActNorm used before data initialization, or initialized twice."""


class DegenerateDataError(BiasLensError):
    """Input data has zero variance where spread is required."""


class CheckpointError(BiasLensError):
    """Base class for checkpoint load/save failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not recognized."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file is truncated or fails its checksum."""


class TrainingDivergedError(BiasLensError):
    """Training loss became non-finite."""
