"""Post-hoc Platt-scaling calibration in multilabel and powerset spaces.

Three parameterisations are supported:

``independent_mult``
    ``p_s <- sigmoid(alpha_s * f(p_s) + beta_s)`` fitted separately per speaker.
``joint_mult``
    ``p <- sigmoid(A f(p) + b)`` with a full S x S matrix.
``joint_power``
    ``q <- softmax(W f(q) + b)`` over the 2^S powerset classes.

``f`` is the clamped log-probability by default; ``feature="logit"`` switches
the multilabel families to log-odds, which makes the identity reachable.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_EPSILON,
    MULTILABEL,
    POWERSET,
    PROBABILITY,
    ConfigurationError,
    ContractError,
    FrameScoreMatrix,
    check_epsilon,
    logit,
    safe_log,
    sigmoid,
    softmax,
)
from .optim import SIGMOID, SOFTMAX, CrossEntropyObjective, minimize_regularized_cross_entropy
from .spaces import PowersetEncoding

log = logging.getLogger(__name__)

INDEPENDENT_MULT = "independent_mult"
JOINT_MULT = "joint_mult"
JOINT_POWER = "joint_power"
STRATEGIES = (INDEPENDENT_MULT, JOINT_MULT, JOINT_POWER)
FEATURES = ("log", "logit")

STRATEGY_SPACE = {
    INDEPENDENT_MULT: MULTILABEL,
    JOINT_MULT: MULTILABEL,
    JOINT_POWER: POWERSET,
}


def strategy_for(space: str, strategy: str) -> str:
    """Map a (space, independent|joint) pair onto a calibration family."""
    if space == POWERSET:
        if strategy != "joint":
            raise ConfigurationError("only joint calibration is defined in powerset space")
        return JOINT_POWER
    if strategy == "independent":
        return INDEPENDENT_MULT
    if strategy == "joint":
        return JOINT_MULT
    raise ConfigurationError(f"unknown calibration strategy {strategy!r}")


def calibration_features(values, space: str, feature: str = "log",
                         epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    if feature not in FEATURES:
        raise ConfigurationError(f"unknown calibration feature {feature!r}")
    if feature == "logit" and space == MULTILABEL:
        return logit(values, epsilon)
    # powerset log-odds differ from log-probabilities by a per-row constant
    # that softmax ignores, so "logit" and "log" coincide there
    return safe_log(values, epsilon)


def fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class CalibrationTrainingSet:
    """Pooled calibration frames.

    ``targets`` is an N x S binary matrix in multilabel space and a vector of
    N class indices in powerset space.
    """

    features: np.ndarray
    targets: np.ndarray
    space: str
    num_speakers: int
    weights: np.ndarray | None = None
    feature: str = "log"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        n = self.features.shape[0]
        if n == 0:
            raise ContractError("calibration training set is empty")
        if self.targets.shape[0] != n:
            raise ContractError("feature and target row counts differ")
        d = self.num_speakers if self.space == MULTILABEL else 2 ** self.num_speakers
        if self.features.ndim != 2 or self.features.shape[1] != d:
            raise ContractError(f"expected {d} feature columns for {self.space} space")
        if self.space == POWERSET:
            self.targets = self.targets.reshape(-1).astype(np.int64)
            if self.targets.min() < 0 or self.targets.max() >= d:
                raise ContractError("class index out of range")
        elif self.targets.shape != (n, d):
            raise ContractError("multilabel targets must be N x S")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape[0] != n or np.any(self.weights < 0):
                raise ContractError("weights must be non-negative, one per frame")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_probabilities(cls, probs: list[FrameScoreMatrix], targets: list[np.ndarray],
                           feature: str = "log", epsilon: float = DEFAULT_EPSILON,
                           keep: list[np.ndarray] | None = None) -> "CalibrationTrainingSet":
        """Pool probability matrices and their aligned T x S activity targets.

        ``keep`` optionally masks frames per recording.
        """
        if not probs:
            raise ContractError("calibration training set is empty")
        space, num_speakers = probs[0].space, probs[0].num_speakers
        feats, tgts = [], []
        encoding = PowersetEncoding(num_speakers) if space == POWERSET else None
        for i, (m, y) in enumerate(zip(probs, targets, strict=True)):
            if m.space != space or m.num_speakers != num_speakers or m.kind != PROBABILITY:
                raise ContractError("calibration inputs must share space and speaker count")
            y = np.asarray(y)
            if y.shape != (m.num_frames, num_speakers):
                raise ContractError("targets must be T x S and match the scores")
            x = calibration_features(m.values, space, feature, epsilon)
            if keep is not None:
                x, y = x[keep[i]], y[keep[i]]
            feats.append(x)
            tgts.append(encoding.encode(y) if encoding else y)
        return cls(
            features=np.concatenate(feats),
            targets=np.concatenate(tgts),
            space=space,
            num_speakers=num_speakers,
            feature=feature,
            epsilon=epsilon,
        )


@dataclass
class CalibrationModel:
    strategy: str
    space: str
    num_speakers: int
    scale: np.ndarray  # vector (S) for independent_mult, square matrix otherwise
    bias: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    feature: str = "log"
    trained_on: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown calibration strategy {self.strategy!r}")
        if STRATEGY_SPACE[self.strategy] != self.space:
            raise ContractError(f"{self.strategy} calibration lives in {STRATEGY_SPACE[self.strategy]} space")
        check_epsilon(self.epsilon)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        d = self.dim
        want = (d,) if self.strategy == INDEPENDENT_MULT else (d, d)
        if self.scale.shape != want or self.bias.shape != (d,):
            raise ContractError(f"{self.strategy} parameters must have shapes {want} and ({d},)")

    @property
    def dim(self) -> int:
        return self.num_speakers if self.space == MULTILABEL else 2 ** self.num_speakers

    @classmethod
    def identity(cls, num_speakers: int, epsilon: float = DEFAULT_EPSILON) -> "CalibrationModel":
        """Joint powerset model with ``W = I, b = 0``: the identity on the simplex."""
        k = 2 ** num_speakers
        return cls(JOINT_POWER, POWERSET, num_speakers, np.eye(k), np.zeros(k), epsilon)

    def scores(self, values: np.ndarray) -> np.ndarray:
        x = calibration_features(values, self.space, self.feature, self.epsilon)
        if self.strategy == INDEPENDENT_MULT:
            return x * self.scale + self.bias
        return x @ self.scale.T + self.bias

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "space": self.space,
            "S": self.num_speakers,
            "K": 2 ** self.num_speakers,
            "scale": self.scale.ravel().tolist(),
            "scale_shape": list(self.scale.shape),
            "bias": self.bias.tolist(),
            "epsilon": self.epsilon,
            "feature": self.feature,
            "trained_on": self.trained_on,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationModel":
        try:
            strategy = doc["strategy"]
            s = int(doc["S"])
            scale = np.asarray(doc["scale"], dtype=np.float64)
            shape = doc.get("scale_shape")
            if shape is None:
                d = s if doc["space"] == MULTILABEL else 2 ** s
                shape = (d,) if strategy == INDEPENDENT_MULT else (d, d)
            return cls(
                strategy=strategy,
                space=doc["space"],
                num_speakers=s,
                scale=scale.reshape(shape),
                bias=doc["bias"],
                epsilon=float(doc.get("epsilon", DEFAULT_EPSILON)),
                feature=doc.get("feature", "log"),
                trained_on=doc.get("trained_on", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed calibration model document: {exc}") from exc


def fit_calibration(train: CalibrationTrainingSet, strategy: str, l2_c: float = 1.0,
                    max_iter: int = 1000) -> CalibrationModel:
    """Fit one of the three Platt-scaling families by cross-entropy minimisation."""
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown calibration strategy {strategy!r}")
    if STRATEGY_SPACE[strategy] != train.space:
        raise ContractError(f"{strategy} needs {STRATEGY_SPACE[strategy]} features, got {train.space}")
    s = train.num_speakers
    x, y, w = train.features, train.targets, train.weights
    trained_on = fingerprint(x, y)
    diagnostics = {}

    if strategy == INDEPENDENT_MULT:
        alpha, beta = np.zeros(s), np.zeros(s)
        ce = []
        for i in range(s):
            res = minimize_regularized_cross_entropy(
                x[:, i : i + 1], y[:, i : i + 1], SIGMOID, l2_c, max_iter, sample_weight=w)
            alpha[i], beta[i] = res.weights[0, 0], res.bias[0]
            ce.append(res.cross_entropy)
        diagnostics["cross_entropy"] = float(np.sum(ce))
        scale, bias = alpha, beta
    elif strategy == JOINT_MULT:
        res = minimize_regularized_cross_entropy(x, y, SIGMOID, l2_c, max_iter, sample_weight=w)
        scale, bias = res.weights, res.bias
        diagnostics.update(cross_entropy=res.cross_entropy, converged=res.converged)
    else:
        k = 2 ** s
        res = minimize_regularized_cross_entropy(
            x, y, SOFTMAX, l2_c, max_iter, sample_weight=w, n_out=k,
            init=(np.eye(k), np.zeros(k)))
        scale, bias = res.weights, res.bias
        objective = CrossEntropyObjective(x, y, SOFTMAX, l2_c, w, n_out=k)
        identity_ce = objective.cross_entropy(objective.pack(np.eye(k), np.zeros(k)))
        if identity_ce < res.cross_entropy:
            # the penalty can pull the optimum marginally above the raw scores
            log.info("keeping identity calibration (%.6g < %.6g)", identity_ce, res.cross_entropy)
            scale, bias = np.eye(k), np.zeros(k)
            diagnostics["identity_kept"] = True
        diagnostics.update(cross_entropy=min(identity_ce, res.cross_entropy),
                           converged=res.converged)

    return CalibrationModel(
        strategy=strategy,
        space=train.space,
        num_speakers=s,
        scale=scale,
        bias=bias,
        epsilon=train.epsilon,
        feature=train.feature,
        trained_on=trained_on,
        diagnostics=diagnostics,
    )


def apply_calibration(model: CalibrationModel, m: FrameScoreMatrix) -> FrameScoreMatrix:
    if m.kind != PROBABILITY:
        raise ContractError("apply_calibration expects probabilities")
    if m.space != model.space or m.num_speakers != model.num_speakers:
        raise ContractError(
            f"model calibrates {model.space} scores for S={model.num_speakers}, "
            f"got {m.space} with S={m.num_speakers}"
        )
    s = model.scores(m.values)
    values = sigmoid(s) if model.space == MULTILABEL else softmax(s, axis=1)
    return m.replace(values=values)
