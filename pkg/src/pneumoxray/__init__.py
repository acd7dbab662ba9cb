"""Reproducible chest X-ray pneumonia classification benchmark.

Pipeline: stratified dataset splitting, deterministic preprocessing and
augmentation, a scratch CNN plus three pretrained backbones under frozen and
fine-tuned regimes, plateau/early-stop training control, clinical evaluation
metrics, Grad-CAM case panels, ensemble combination, and table/figure reports.
"""

__version__ = "0.1.0"

from .data import (
    AugmentPolicy,
    ImageRecord,
    Label,
    PreprocessConfig,
    SplitManifest,
    SplitName,
    XrayDataset,
    augment_generator,
    augment_image,
    destandardize,
    load_image,
    load_manifest,
    make_datasets,
    manifest_hash,
    preprocess_image,
    save_manifest,
    scan_dataset_dir,
    standardize,
    stratified_split,
    to_unit_tensor,
)
from .config import (
    RunConfig,
    config_schema,
    default_run_config,
    load_run_config,
    parse_model_token,
    parse_run_config,
)
from .ensemble import (
    MemberPrediction,
    load_member,
    majority_vote,
    simple_average,
    weighted_average,
)
from .errors import (
    ConfigError,
    DatasetError,
    EnsembleError,
    EvaluationError,
    ImageDecodeError,
    ModelBuildError,
    PneumoXrayError,
    ReportError,
    SplitError,
    TrainingDivergedError,
    TrainingError,
    WeightsUnavailableError,
)
from .explain import (
    ActivationBundle,
    Category,
    Heatmap,
    capture,
    categorize,
    gradcam,
    overlay,
    render_case_panels,
    select_case_panel,
    upsample_heatmap,
)
from .metrics import (
    ClassificationReport,
    ClinicalReport,
    ConfusionMatrix,
    PredictionSet,
    RocCurve,
    auc_pairwise,
    classification_report,
    clinical_report,
    confusion,
    confusion_at_threshold,
    evaluate_predictions,
    per_class_from_confusion,
    per_class_metrics,
    read_metrics_json,
    read_predictions_csv,
    roc_and_auc,
    write_metrics_json,
    write_predictions_csv,
    write_roc_csv,
)
from .models import (
    ArchitectureId,
    ModelHandle,
    ModelSpec,
    ParamCounts,
    ParamGroup,
    Regime,
    RegimeConfig,
    build_custom_cnn,
    build_model,
    build_transfer_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .report import ReportBundle, generate_report
from .training import (
    EarlyStopper,
    EpochRecord,
    PlateauScheduler,
    StopReason,
    TrainConfig,
    TrainResult,
    predict,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
