"""Frame-level score matrices, link functions and post-processing."""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter as _nd_median_filter
from scipy.optimize import linear_sum_assignment

PROBABILITY = "probability"
LOGIT = "logit"
MULTILABEL = "multilabel"
POWERSET = "powerset"

KINDS = (PROBABILITY, LOGIT)
SPACES = (MULTILABEL, POWERSET)

DEFAULT_EPSILON = 1e-7
SIMPLEX_TOL = 1e-9
EXHAUSTIVE_MAX_SPEAKERS = 6


class DiacalError(Exception):
    """Base class for errors raised by this package."""


class ContractError(DiacalError, ValueError):
    """An input violates the documented contract of an operation."""


class ConfigurationError(DiacalError, ValueError):
    """Invalid configuration value or combination."""


class CapabilityError(DiacalError, ValueError):
    """Request exceeds what the implementation supports."""


def _readonly(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FrameScoreMatrix:
    """T x D per-frame scores with declared kind and space.

    ``D`` equals the number of speakers for multilabel scores and
    ``2 ** num_speakers`` for powerset scores.
    """

    values: np.ndarray
    kind: str
    space: str
    num_speakers: int
    frame_rate_hz: float = 10.0
    recording_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ContractError(f"score matrix must be 2-D, got shape {values.shape}")
        if self.kind not in KINDS:
            raise ContractError(f"unknown kind {self.kind!r}")
        if self.space not in SPACES:
            raise ContractError(f"unknown space {self.space!r}")
        if self.num_speakers < 1:
            raise ContractError("num_speakers must be >= 1")
        if not self.frame_rate_hz > 0:
            raise ContractError("frame_rate_hz must be positive")
        expected = self.num_speakers if self.space == MULTILABEL else 2 ** self.num_speakers
        if values.shape[1] != expected:
            raise ContractError(
                f"{self.space} scores with S={self.num_speakers} need {expected} columns, "
                f"got {values.shape[1]}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("score matrix contains non-finite values")
        if self.kind == PROBABILITY:
            if values.size and (values.min() < 0.0 or values.max() > 1.0):
                raise ContractError("probabilities must lie in [0, 1]")
            if self.space == POWERSET and values.shape[0]:
                dev = np.abs(values.sum(axis=1) - 1.0).max()
                if dev > SIMPLEX_TOL:
                    raise ContractError(f"powerset rows must sum to 1 (max deviation {dev:.3g})")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def replace(self, **changes) -> "FrameScoreMatrix":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class BinaryActivityMatrix:
    """T x S speaker activity indicators."""

    values: np.ndarray
    frame_rate_hz: float = 10.0
    recording_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ContractError(f"activity matrix must be 2-D, got shape {values.shape}")
        if values.size and not np.all((values == 0) | (values == 1)):
            raise ContractError("activity entries must be exactly 0 or 1")
        if not self.frame_rate_hz > 0:
            raise ContractError("frame_rate_hz must be positive")
        arr = values.astype(np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_speakers(self) -> int:
        return self.values.shape[1]

    def replace(self, **changes) -> "BinaryActivityMatrix":
        return dataclasses.replace(self, **changes)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # exp of the negative magnitude only, so no overflow for either sign
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z, axis: int = -1):
    """Softmax along ``axis`` with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def check_epsilon(epsilon: float) -> float:
    if not 0.0 < epsilon < 0.5:
        raise ConfigurationError(f"epsilon must lie in (0, 0.5), got {epsilon!r}")
    return float(epsilon)


def safe_log(p, epsilon: float = DEFAULT_EPSILON):
    epsilon = check_epsilon(epsilon)
    return np.log(np.clip(np.asarray(p, dtype=np.float64), epsilon, 1.0 - epsilon))


def logit(p, epsilon: float = DEFAULT_EPSILON):
    """Clamped log-odds ``log(p / (1 - p))``."""
    epsilon = check_epsilon(epsilon)
    p = np.clip(np.asarray(p, dtype=np.float64), epsilon, 1.0 - epsilon)
    return np.log(p) - np.log1p(-p)


def upsample(m, factor: int):
    """Repeat each frame ``factor`` times and scale the frame rate accordingly."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {factor!r}")
    factor = int(factor)
    if factor == 1:
        return m
    return m.replace(
        values=np.repeat(m.values, factor, axis=0),
        frame_rate_hz=m.frame_rate_hz * factor,
    )


def median_filter(m: FrameScoreMatrix, window: int = 11) -> FrameScoreMatrix:
    """Per-column sliding median with reflected edges.

    Reflection repeats the edge sample (``c b a | a b c | c b a``), so a
    boundary frame is compared against its own neighbourhood rather than
    against padding.
    """
    if m.kind != PROBABILITY:
        raise ContractError("median_filter expects probability scores")
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be a positive odd integer, got {window!r}")
    if window == 1 or m.num_frames == 0:
        return m
    filtered = _nd_median_filter(m.values, size=(int(window), 1), mode="reflect")
    return m.replace(values=filtered)


def threshold_decisions(m: FrameScoreMatrix, tau: float = 0.5) -> BinaryActivityMatrix:
    if m.space != MULTILABEL or m.kind != PROBABILITY:
        raise ContractError("threshold_decisions expects multilabel probabilities")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau!r}")
    return BinaryActivityMatrix(
        values=(m.values > tau).astype(np.uint8),
        frame_rate_hz=m.frame_rate_hz,
        recording_id=m.recording_id,
    )


def powerset_decision(m: FrameScoreMatrix) -> BinaryActivityMatrix:
    """Hard speaker decisions from the most probable powerset class.

    Ties go to the lowest class index, so a uniform row decodes to silence.
    """
    if m.space != POWERSET or m.kind != PROBABILITY:
        raise ContractError("powerset_decision expects powerset probabilities")
    if m.num_frames and np.abs(m.values.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("powerset rows must sum to 1")
    classes = np.argmax(m.values, axis=1)
    bits = (classes[:, None] >> np.arange(m.num_speakers)[None, :]) & 1
    return BinaryActivityMatrix(
        values=bits.astype(np.uint8),
        frame_rate_hz=m.frame_rate_hz,
        recording_id=m.recording_id,
    )


def best_permutation(cost: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` minimising ``sum_j cost[j, perm[j]]``.

    Small problems are enumerated in lexicographic order and the first strict
    minimum is kept, which makes ties resolve to the smallest permutation.
    """
    n = cost.shape[0]
    if n <= EXHAUSTIVE_MAX_SPEAKERS:
        best, best_cost = None, np.inf
        rows = np.arange(n)
        for perm in itertools.permutations(range(n)):
            c = cost[rows, perm].sum()
            if c < best_cost:
                best, best_cost = perm, c
        return np.asarray(best, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)].astype(np.int64)
