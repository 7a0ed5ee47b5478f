"""Calibration / fusion pipelines: ordering, spaces, fit and inference."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import (
    CalibrationModel,
    CalibrationTrainingSet,
    apply_calibration,
    fit_calibration,
    strategy_for,
)
from .core import (
    DEFAULT_EPSILON,
    MULTILABEL,
    POWERSET,
    PROBABILITY,
    SPACES,
    BinaryActivityMatrix,
    ConfigurationError,
    ContractError,
    FrameScoreMatrix,
    check_epsilon,
    median_filter,
    powerset_decision,
    threshold_decisions,
    upsample,
)
from .evaluation import (
    Annotation,
    DERReport,
    ExperimentResult,
    activity_to_annotation,
    bce_sum,
    compute_der,
    frame_targets,
    targets_for_predictions,
)
from .fusion import (
    METALEARNER,
    METHODS,
    FusionInput,
    MetaLearnerModel,
    align_systems,
    fit_metalearner,
    fuse,
)
from .spaces import PowersetEncoding, permute_speakers, to_logits, to_probabilities, to_space

log = logging.getLogger(__name__)

CALIBRATE_THEN_FUSE = "calibrate_then_fuse"
FUSE_THEN_CALIBRATE = "fuse_then_calibrate"
ORDERS = (CALIBRATE_THEN_FUSE, FUSE_THEN_CALIBRATE)
NO_FUSION = "none"
DECISIONS = ("threshold", "powerset_argmax")

_ALIASES = {
    "c->f": CALIBRATE_THEN_FUSE, "c→f": CALIBRATE_THEN_FUSE, "cf": CALIBRATE_THEN_FUSE,
    "f->c": FUSE_THEN_CALIBRATE, "f→c": FUSE_THEN_CALIBRATE, "fc": FUSE_THEN_CALIBRATE,
    "mult": MULTILABEL, "power": POWERSET,
}


def _canon(value):
    return _ALIASES.get(str(value).lower(), value) if isinstance(value, str) else value


@dataclass
class PostProcessing:
    upsample_factor: int = 10
    median_window: int = 11
    threshold: float = 0.5
    decision: str = "threshold"
    filter_before_upsample: bool = False

    def __post_init__(self):
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise ConfigurationError("upsample_factor must be an integer >= 1")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ConfigurationError("median_window must be a positive odd integer")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")
        if self.decision not in DECISIONS:
            raise ConfigurationError(f"unknown decision rule {self.decision!r}")


@dataclass
class PipelineConfig:
    """The three configurable decisions plus fitting and post-processing options."""

    name: str = ""
    order: str = CALIBRATE_THEN_FUSE
    calibration_space: str = POWERSET
    calibration_strategy: str = "joint"
    fusion_space: str = MULTILABEL
    fusion_method: str = "average_probs"
    calibrate: bool = True
    feature: str = "log"
    l2_c: float = 1.0
    max_iter: int = 1000
    epsilon: float = DEFAULT_EPSILON
    systems: list | None = None
    post: PostProcessing = field(default_factory=PostProcessing)

    def __post_init__(self):
        self.order = _canon(self.order)
        self.calibration_space = _canon(self.calibration_space)
        self.fusion_space = _canon(self.fusion_space)
        if isinstance(self.post, dict):
            self.post = PostProcessing(**self.post)
        if self.order not in ORDERS:
            raise ConfigurationError(f"unknown order {self.order!r}")
        if self.calibration_space not in SPACES or self.fusion_space not in SPACES:
            raise ConfigurationError("spaces must be multilabel or powerset")
        if self.fusion_method not in METHODS + (NO_FUSION,):
            raise ConfigurationError(f"unknown fusion method {self.fusion_method!r}")
        if self.calibration_strategy not in ("independent", "joint"):
            raise ConfigurationError(f"unknown calibration strategy {self.calibration_strategy!r}")
        if self.calibrate and self.calibration_space == POWERSET and self.calibration_strategy != "joint":
            raise ConfigurationError("powerset calibration must be joint")
        if self.order == FUSE_THEN_CALIBRATE and self.fusion_method == NO_FUSION:
            raise ConfigurationError("fuse_then_calibrate needs a fusion method")
        if not self.l2_c > 0 or self.max_iter < 1:
            raise ConfigurationError("l2_c must be positive and max_iter >= 1")
        check_epsilon(self.epsilon)
        if not self.name:
            self.name = self.default_name()

    @property
    def calibration_family(self) -> str:
        return strategy_for(self.calibration_space, self.calibration_strategy)

    @property
    def strategy_label(self) -> str:
        if not self.calibrate:
            return "uncal"
        return "C->F" if self.order == CALIBRATE_THEN_FUSE else "F->C"

    def default_name(self) -> str:
        parts = [self.fusion_method]
        if self.fusion_method != NO_FUSION:
            parts.append(self.fusion_space[:4])
        if self.calibrate:
            parts += [self.strategy_label, f"{self.calibration_strategy}-{self.calibration_space[:5]}"]
        else:
            parts.append("uncal")
        if self.systems:
            parts.append("+".join(self.systems))
        return "/".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["systems"] is None:
            del d["systems"]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown pipeline config fields {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Recording:
    recording_id: str
    systems: dict  # system id -> FrameScoreMatrix
    annotation: Annotation | None = None


@dataclass
class TrainedPipeline:
    config: PipelineConfig
    system_ids: list
    num_speakers: int
    calibration_models: list = field(default_factory=list)
    metalearner: MetaLearnerModel | None = None
    alignments: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.config
        expected = 0
        if cfg.calibrate:
            expected = len(self.system_ids) if cfg.order == CALIBRATE_THEN_FUSE else 1
        if len(self.calibration_models) != expected:
            raise ContractError(f"{cfg.order} with {len(self.system_ids)} systems needs "
                                f"{expected} calibration models, got {len(self.calibration_models)}")
        for m in self.calibration_models:
            if m.space != cfg.calibration_space:
                raise ContractError("calibration model space does not match the config")
        if (cfg.fusion_method == METALEARNER) != (self.metalearner is not None):
            raise ContractError("metalearner presence does not match the config")

    def to_dict(self) -> dict:
        return {
            "format": "diacal-pipeline v1",
            "config": self.config.to_dict(),
            "system_ids": list(self.system_ids),
            "num_speakers": self.num_speakers,
            "calibration_models": [m.to_dict() for m in self.calibration_models],
            "metalearner": self.metalearner.to_dict() if self.metalearner else None,
            "alignments": {k: [list(map(int, p)) for p in v] for k, v in self.alignments.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainedPipeline":
        try:
            meta = doc.get("metalearner")
            return cls(
                config=PipelineConfig.from_dict(doc["config"]),
                system_ids=list(doc["system_ids"]),
                num_speakers=int(doc["num_speakers"]),
                calibration_models=[CalibrationModel.from_dict(m) for m in doc["calibration_models"]],
                metalearner=MetaLearnerModel.from_dict(meta) if meta else None,
                alignments=dict(doc.get("alignments", {})),
            )
        except KeyError as exc:
            raise ContractError(f"malformed pipeline document: missing {exc}") from exc


@dataclass
class PipelineOutput:
    probs: FrameScoreMatrix  # multilabel probabilities at the model frame rate
    decisions: BinaryActivityMatrix  # after upsampling and filtering
    hypothesis: Annotation
    final: FrameScoreMatrix  # pipeline output in its native space


def _select_systems(config: PipelineConfig, available: list[str]) -> list[str]:
    ids = list(config.systems) if config.systems else list(available)
    missing = [s for s in ids if s not in available]
    if missing:
        raise ContractError(f"systems {missing} not present")
    if config.fusion_method == NO_FUSION and len(ids) != 1:
        raise ConfigurationError("fusion_method 'none' needs exactly one system")
    return ids


def prepare_systems(rec: Recording, system_ids: list[str]) -> tuple[list[FrameScoreMatrix], list[list[int]]]:
    """Probabilities of the selected systems with speakers aligned to the first one."""
    missing = [s for s in system_ids if s not in rec.systems]
    if missing:
        raise ContractError(f"{rec.recording_id}: missing systems {missing}")
    probs = [to_probabilities(rec.systems[s]) for s in system_ids]
    perms = [list(range(probs[0].num_speakers))]
    if len(probs) > 1:
        for i, perm in enumerate(align_systems(probs[0], probs[1:]), start=1):
            perms.append(perm.tolist())
            probs[i] = permute_speakers(probs[i], perm)
    return probs, perms


def _reference(anchor: FrameScoreMatrix, annotation: Annotation | None):
    if annotation is None:
        raise ContractError(f"{anchor.recording_id}: training recording has no reference")
    targets = frame_targets(annotation, anchor.frame_rate_hz, anchor.num_frames)
    return targets_for_predictions(anchor, targets, DEFAULT_EPSILON)


def _fusion_targets(ys, keeps, space: str, num_speakers: int):
    y = np.concatenate(ys)
    if space == MULTILABEL:
        return y, None
    keep = np.concatenate(keeps)
    return PowersetEncoding(num_speakers).encode(y[keep]), keep


def _fuse(config: PipelineConfig, systems: list[FrameScoreMatrix], ids: list[str],
          metalearner: MetaLearnerModel | None) -> FrameScoreMatrix:
    if config.fusion_method == NO_FUSION:
        return systems[0]
    inputs = FusionInput([to_space(m, config.fusion_space) for m in systems], ids, config.epsilon)
    return fuse(config.fusion_method, inputs, metalearner)


def _fit_calibrator(config: PipelineConfig, probs: list[FrameScoreMatrix], ys, keeps) -> CalibrationModel:
    probs = [to_space(m, config.calibration_space) for m in probs]
    train = CalibrationTrainingSet.from_probabilities(
        probs, ys, config.feature, config.epsilon,
        keep=keeps if config.calibration_space == POWERSET else None)
    return fit_calibration(train, config.calibration_family, config.l2_c, config.max_iter)


def _fit_metalearner(config, per_rec_systems, ids, ys, keeps, num_speakers) -> MetaLearnerModel:
    logits = []
    for i in range(len(ids)):
        z = [to_logits(to_space(systems[i], config.fusion_space), config.epsilon).values
             for systems in per_rec_systems]
        logits.append(np.concatenate(z))
    targets, keep = _fusion_targets(ys, keeps, config.fusion_space, num_speakers)
    if keep is not None:
        logits = [z[keep] for z in logits]
    return fit_metalearner(logits, targets, config.fusion_space, ids, config.l2_c,
                           config.max_iter, config.epsilon)


def fit_pipeline(config: PipelineConfig, train: list[Recording]) -> TrainedPipeline:
    """Fit calibrators and/or the metalearner on reference-labelled recordings."""
    if not train:
        raise ContractError("empty training set")
    ids = _select_systems(config, list(train[0].systems))
    prepared, ys, keeps, alignments = [], [], [], {}
    for rec in train:
        probs, perms = prepare_systems(rec, ids)
        y, overflow = _reference(probs[0], rec.annotation)
        if overflow.any():
            log.warning("%s: %d frames with more active speakers than modelled are dropped "
                        "from powerset training", rec.recording_id, int(overflow.sum()))
        prepared.append(probs)
        ys.append(y)
        keeps.append(~overflow)
        alignments[rec.recording_id] = perms
    num_speakers = prepared[0][0].num_speakers

    cal_models: list[CalibrationModel] = []
    metalearner = None
    if config.order == CALIBRATE_THEN_FUSE:
        systems = prepared
        if config.calibrate:
            for i in range(len(ids)):
                cal_models.append(_fit_calibrator(config, [p[i] for p in prepared], ys, keeps))
            systems = [[apply_calibration(cal_models[i], to_space(p[i], config.calibration_space))
                        for i in range(len(ids))] for p in prepared]
        if config.fusion_method == METALEARNER:
            metalearner = _fit_metalearner(config, systems, ids, ys, keeps, num_speakers)
    else:
        if config.fusion_method == METALEARNER:
            metalearner = _fit_metalearner(config, prepared, ids, ys, keeps, num_speakers)
        if config.calibrate:
            fused = [_fuse(config, p, ids, metalearner) for p in prepared]
            cal_models.append(_fit_calibrator(config, fused, ys, keeps))

    return TrainedPipeline(config, ids, num_speakers, cal_models, metalearner, alignments)


def _forward(tp: TrainedPipeline, systems: list[FrameScoreMatrix]) -> FrameScoreMatrix:
    cfg = tp.config
    if cfg.order == CALIBRATE_THEN_FUSE:
        if cfg.calibrate:
            systems = [apply_calibration(m, to_space(s, cfg.calibration_space))
                       for m, s in zip(tp.calibration_models, systems)]
        return _fuse(cfg, systems, tp.system_ids, tp.metalearner)
    fused = _fuse(cfg, systems, tp.system_ids, tp.metalearner)
    if cfg.calibrate:
        fused = apply_calibration(tp.calibration_models[0], to_space(fused, cfg.calibration_space))
    return fused


def postprocess(final: FrameScoreMatrix, post: PostProcessing) -> BinaryActivityMatrix:
    """Upsample, median-filter and threshold pipeline output."""
    if post.decision == "powerset_argmax":
        hard = powerset_decision(to_space(final, POWERSET))
        probs = FrameScoreMatrix(hard.values.astype(np.float64), PROBABILITY, MULTILABEL,
                                 final.num_speakers, final.frame_rate_hz, final.recording_id)
    else:
        probs = to_space(final, MULTILABEL)
    if post.filter_before_upsample:
        probs = upsample(median_filter(probs, post.median_window), post.upsample_factor)
    else:
        probs = median_filter(upsample(probs, post.upsample_factor), post.median_window)
    return threshold_decisions(probs, post.threshold)


def apply_pipeline(tp: TrainedPipeline, rec: Recording) -> PipelineOutput:
    available = set(rec.systems)
    if not set(tp.system_ids) <= available:
        raise ContractError(f"{rec.recording_id}: pipeline expects systems {tp.system_ids}, "
                            f"got {sorted(available)}")
    systems, _ = prepare_systems(rec, tp.system_ids)
    if systems[0].num_speakers != tp.num_speakers:
        raise ContractError("speaker count differs from training")
    final = _forward(tp, systems)
    decisions = postprocess(final, tp.config.post)
    hyp = activity_to_annotation(decisions)
    return PipelineOutput(to_space(final, MULTILABEL), decisions, hyp, final)


@dataclass
class RecordingScore:
    der: DERReport
    bce_total: float
    bce_count: int


def score_output(out: PipelineOutput, ref: Annotation, collar_s: float = 0.25,
                 score_overlap: bool = True) -> RecordingScore:
    targets = frame_targets(ref, out.probs.frame_rate_hz, out.probs.num_frames)
    total, count = bce_sum(out.probs, targets)
    return RecordingScore(compute_der(ref, out.hypothesis, collar_s, score_overlap), total, count)


def evaluate_pipeline(tp: TrainedPipeline, test: list[Recording], collar_s: float = 0.25,
                      score_overlap: bool = True) -> tuple[DERReport, float]:
    """Pooled DER report and frame-weighted mean BCE over test recordings."""
    reports, total, count = [], 0.0, 0
    for rec in test:
        if rec.annotation is None:
            raise ContractError(f"{rec.recording_id}: no reference to score against")
        score = score_output(apply_pipeline(tp, rec), rec.annotation, collar_s, score_overlap)
        reports.append(score.der)
        total += score.bce_total
        count += score.bce_count
    return DERReport.combine(reports), total / count


def run_experiment(grid: list[PipelineConfig], train: list[Recording], test: list[Recording],
                   collar_s: float = 0.25, score_overlap: bool = True) -> list[ExperimentResult]:
    overlap = {r.recording_id for r in train} & {r.recording_id for r in test}
    if overlap:
        log.warning("%d recordings appear in both training and test sets", len(overlap))
    results = []
    for config in grid:
        tp = fit_pipeline(config, train)
        der, bce = evaluate_pipeline(tp, test, collar_s, score_overlap)
        log.info("%s: DER %.3f BCE %.4f", config.name, der.der_pct, bce)
        results.append(ExperimentResult(config.name, config.fusion_method, config.strategy_label, der, bce))
    return results


def synthetic_recordings(synth) -> list[Recording]:
    """Wrap generator output as pipeline recordings."""
    return [Recording(r.recording_id, dict(r.systems), r.annotation) for r in synth]
