"""Multilabel <-> powerset conversions.

Powerset class ``k`` stands for the speaker subset ``{s : bit s of k is set}``,
so for two speakers the class order is ``[{}, {0}, {1}, {0, 1}]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import (
    DEFAULT_EPSILON,
    LOGIT,
    MULTILABEL,
    POWERSET,
    PROBABILITY,
    CapabilityError,
    ContractError,
    FrameScoreMatrix,
    logit,
    safe_log,
    sigmoid,
    softmax,
)

MAX_POWERSET_SPEAKERS = 20


@dataclass(frozen=True)
class PowersetEncoding:
    num_speakers: int

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ContractError("num_speakers must be >= 1")
        if self.num_speakers > MAX_POWERSET_SPEAKERS:
            raise CapabilityError(
                f"powerset space supports at most {MAX_POWERSET_SPEAKERS} speakers"
            )

    @property
    def class_count(self) -> int:
        return 2 ** self.num_speakers

    @cached_property
    def membership(self) -> np.ndarray:
        """K x S 0/1 matrix; row k marks the speakers of class k."""
        k = np.arange(self.class_count)[:, None]
        return ((k >> np.arange(self.num_speakers)[None, :]) & 1).astype(np.float64)

    def subset(self, k: int) -> frozenset:
        if not 0 <= k < self.class_count:
            raise ContractError(f"class index {k} out of range")
        return frozenset(s for s in range(self.num_speakers) if (k >> s) & 1)

    def index(self, speakers) -> int:
        k = 0
        for s in speakers:
            if not 0 <= s < self.num_speakers:
                raise ContractError(f"speaker index {s} out of range")
            k |= 1 << s
        return k

    def encode(self, activity: np.ndarray) -> np.ndarray:
        """Class index per row of a T x S binary matrix."""
        activity = np.asarray(activity, dtype=np.int64)
        return activity @ (1 << np.arange(self.num_speakers))


def _check_simplex(values: np.ndarray, tol: float = 1e-6) -> None:
    if values.shape[0] and np.abs(values.sum(axis=1) - 1.0).max() > tol:
        raise ContractError("powerset rows are off the probability simplex")


def mult_to_power_values(p: np.ndarray) -> np.ndarray:
    """Joint class probabilities of independent per-speaker activities."""
    p = np.asarray(p, dtype=np.float64)
    num_speakers = p.shape[1]
    if num_speakers > MAX_POWERSET_SPEAKERS:
        raise CapabilityError(
            f"powerset space supports at most {MAX_POWERSET_SPEAKERS} speakers"
        )
    out = np.ones((p.shape[0], 1))
    for s in range(num_speakers):
        # classes with bit s set occupy the upper half of the new block
        col = p[:, s : s + 1]
        out = np.hstack([out * (1.0 - col), out * col])
    return out


def power_to_mult_values(q: np.ndarray, num_speakers: int) -> np.ndarray:
    return np.clip(q @ PowersetEncoding(num_speakers).membership, 0.0, 1.0)


def mult_to_power(m: FrameScoreMatrix) -> FrameScoreMatrix:
    if m.space != MULTILABEL or m.kind != PROBABILITY:
        raise ContractError("mult_to_power expects multilabel probabilities")
    PowersetEncoding(m.num_speakers)
    return m.replace(values=mult_to_power_values(m.values), space=POWERSET)


def power_to_mult(m: FrameScoreMatrix) -> FrameScoreMatrix:
    if m.space != POWERSET or m.kind != PROBABILITY:
        raise ContractError("power_to_mult expects powerset probabilities")
    _check_simplex(m.values)
    return m.replace(values=power_to_mult_values(m.values, m.num_speakers), space=MULTILABEL)


def to_logits(m: FrameScoreMatrix, epsilon: float = DEFAULT_EPSILON) -> FrameScoreMatrix:
    """Logit representation: log-odds for multilabel, log-probabilities for powerset."""
    if m.kind == LOGIT:
        return m
    if m.space == MULTILABEL:
        return m.replace(values=logit(m.values, epsilon), kind=LOGIT)
    return m.replace(values=safe_log(m.values, epsilon), kind=LOGIT)


def to_probabilities(m: FrameScoreMatrix) -> FrameScoreMatrix:
    if m.kind == PROBABILITY:
        return m
    link = sigmoid if m.space == MULTILABEL else softmax
    return m.replace(values=link(m.values), kind=PROBABILITY)


def to_space(m: FrameScoreMatrix, space: str) -> FrameScoreMatrix:
    """Probability matrix expressed in ``space``, converting if needed."""
    m = to_probabilities(m)
    if m.space == space:
        return m
    return mult_to_power(m) if space == POWERSET else power_to_mult(m)


def speaker_class_permutation(perm, num_speakers: int) -> np.ndarray:
    """Class reordering induced by reordering speaker columns with ``perm``.

    New speaker ``j`` is old speaker ``perm[j]``; the returned index array maps
    each new class to the old class holding the same speakers.
    """
    perm = np.asarray(perm, dtype=np.int64)
    k = np.arange(2 ** num_speakers)
    old = np.zeros_like(k)
    for j in range(num_speakers):
        old |= ((k >> j) & 1) << perm[j]
    return old


def permute_speakers(m: FrameScoreMatrix, perm) -> FrameScoreMatrix:
    """Reorder speakers so that new column ``j`` is old speaker ``perm[j]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(m.num_speakers)):
        raise ContractError(f"{perm.tolist()} is not a permutation of {m.num_speakers} speakers")
    if m.space == MULTILABEL:
        return m.replace(values=m.values[:, perm])
    return m.replace(values=m.values[:, speaker_class_permutation(perm, m.num_speakers)])
