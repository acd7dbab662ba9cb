"""Exception hierarchy for the benchmark.

ConfigError maps to CLI exit code 1, every other PneumoXrayError (and any
unexpected exception) maps to exit code 2.
"""


class PneumoXrayError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PneumoXrayError):
    """Invalid or malformed run configuration."""


class DatasetError(PneumoXrayError):
    """Problems locating or reading the image dataset."""


class SplitError(DatasetError):
    """Split preconditions violated (unassigned records, class too small)."""


class ImageDecodeError(DatasetError):
    """An image file could not be decoded."""


class ModelBuildError(PneumoXrayError):
    """Model construction failed (bad spec, unknown architecture)."""


class WeightsUnavailableError(ModelBuildError):
    """Pretrained weights were requested but could not be loaded."""


class TrainingError(PneumoXrayError):
    """Training loop failure (bad splits, invalid monitor values)."""


class TrainingDivergedError(TrainingError):
    """Loss became non-finite; diagnostics were dumped to the run dir."""


class EvaluationError(PneumoXrayError):
    """Evaluation failure (empty prediction set, single-class truth)."""


class EnsembleError(PneumoXrayError):
    """Ensemble combination failure (misaligned members, bad weights)."""


class ReportError(PneumoXrayError):
    """Report generation failure (mixed manifests, nothing to report)."""
