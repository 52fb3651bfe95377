"""Exception types raised across the package."""


class BagnetError(Exception):
    pass


class ShapeError(BagnetError, ValueError):
    pass


class ConfigurationError(BagnetError, ValueError):
    pass


class NumericError(BagnetError, ArithmeticError):
    pass


class TapeUsageError(BagnetError, RuntimeError):
    pass


class OracleInvalidError(BagnetError, RuntimeError):
    """The function handed to the gradient oracle is not deterministic."""


class CheckpointError(BagnetError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


class ManifestError(BagnetError, ValueError):
    pass


class SampleLoadError(BagnetError):
    def __init__(self, sample_id, message):
        super().__init__(f"sample {sample_id!r}: {message}")
        self.sample_id = sample_id


class MissingFileError(SampleLoadError, FileNotFoundError):
    pass


class DecodeError(SampleLoadError):
    pass


class SizeMismatchError(SampleLoadError, ShapeError):
    pass


class TrainingDivergedError(BagnetError, ArithmeticError):
    pass
