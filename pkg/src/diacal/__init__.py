"""Calibration and fusion of frame-level speaker-diarization outputs."""
from .calibration import (
    CalibrationModel,
    CalibrationTrainingSet,
    apply_calibration,
    fit_calibration,
)
from .core import (
    BinaryActivityMatrix,
    CapabilityError,
    ConfigurationError,
    ContractError,
    DiacalError,
    FrameScoreMatrix,
    median_filter,
    powerset_decision,
    safe_log,
    sigmoid,
    softmax,
    threshold_decisions,
    upsample,
)
from .datagen import GeneratorConfig, SystemSpec, bayes_bce, generate
from .evaluation import Annotation, DERReport, compute_bce, compute_der, frame_targets
from .fusion import FusionInput, MetaLearnerModel, align_systems, fit_metalearner, fuse
from .optim import minimize_regularized_cross_entropy
from .pipeline import PipelineConfig, Recording, TrainedPipeline, apply_pipeline, fit_pipeline
from .spaces import PowersetEncoding, mult_to_power, power_to_mult, to_logits

__version__ = "0.1.0"
