"""Reference handling, PIT alignment, DER and BCE scoring, result tables."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import (
    DEFAULT_EPSILON,
    MULTILABEL,
    POWERSET,
    BinaryActivityMatrix,
    ContractError,
    FrameScoreMatrix,
    best_permutation,
    safe_log,
)
from .spaces import power_to_mult, to_probabilities

log = logging.getLogger(__name__)


TOUCH_TOL_S = 1e-9


@dataclass
class Annotation:
    """Speaker segments ``(speaker_id, onset_s, duration_s)`` of one recording."""

    recording_id: str
    segments: list = field(default_factory=list)

    def __post_init__(self):
        segs = []
        for spk, onset, dur in self.segments:
            onset, dur = float(onset), float(dur)
            if onset < 0 or not dur > 0:
                raise ContractError(
                    f"invalid segment ({spk}, {onset}, {dur}) in {self.recording_id}")
            segs.append((str(spk), onset, dur))
        self.segments = segs

    def speakers(self) -> list[str]:
        return sorted({s for s, _, _ in self.segments})

    def canonical(self) -> "Annotation":
        return Annotation(self.recording_id, sorted(self.segments, key=lambda s: (s[1], s[0], s[2])))

    def timelines(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per-speaker merged, sorted ``(starts, ends)``."""
        out = {}
        for spk in self.speakers():
            iv = sorted((on, on + d) for s, on, d in self.segments if s == spk)
            starts, ends = [], []
            for a, b in iv:
                # gaps below a nanosecond are float noise from onset + duration
                if starts and a <= ends[-1] + TOUCH_TOL_S:
                    ends[-1] = max(ends[-1], b)
                else:
                    starts.append(a)
                    ends.append(b)
            out[spk] = (np.array(starts), np.array(ends))
        return out

    def merged(self) -> "Annotation":
        segs = [(spk, a, b - a) for spk, (st, en) in self.timelines().items() for a, b in zip(st, en)]
        return Annotation(self.recording_id, segs).canonical()

    @property
    def end_time(self) -> float:
        return max((on + d for _, on, d in self.segments), default=0.0)


def _active(starts: np.ndarray, ends: np.ndarray, t: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(starts, t, side="right") - 1
    ok = idx >= 0
    out = np.zeros(t.shape, dtype=bool)
    out[ok] = t[ok] < ends[idx[ok]]
    return out


def frame_targets(ref: Annotation, frame_rate_hz: float, num_frames: int,
                  speaker_order: list[str] | None = None) -> BinaryActivityMatrix:
    """Frame ``t`` is active for a speaker when its centre lies in one of the speaker's segments."""
    timelines = ref.timelines()
    if speaker_order is None:
        speaker_order = ref.speakers()
    dropped = sorted(set(timelines) - set(speaker_order))
    if dropped:
        log.warning("%s: dropping reference speakers %s", ref.recording_id, dropped)
    centres = (np.arange(num_frames) + 0.5) / frame_rate_hz
    y = np.zeros((num_frames, len(speaker_order)), dtype=np.uint8)
    for j, spk in enumerate(speaker_order):
        if spk in timelines:
            y[:, j] = _active(*timelines[spk], centres)
    return BinaryActivityMatrix(y, frame_rate_hz, ref.recording_id)


def activity_to_annotation(act: BinaryActivityMatrix, speaker_labels: list[str] | None = None) -> Annotation:
    """Merge runs of active frames into segments."""
    values = act.values
    if speaker_labels is None:
        speaker_labels = [f"spk{s}" for s in range(values.shape[1])]
    segs = []
    rate = act.frame_rate_hz
    for s in range(values.shape[1]):
        col = np.concatenate([[0], values[:, s].astype(np.int8), [0]])
        edges = np.diff(col)
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            segs.append((speaker_labels[s], a / rate, (b - a) / rate))
    return Annotation(act.recording_id, segs).canonical()


def _marginal(probs: FrameScoreMatrix) -> np.ndarray:
    probs = to_probabilities(probs)
    if probs.space == POWERSET:
        probs = power_to_mult(probs)
    return probs.values


def _pad(a: np.ndarray, width: int) -> np.ndarray:
    if a.shape[1] >= width:
        return a
    return np.hstack([a, np.zeros((a.shape[0], width - a.shape[1]), dtype=a.dtype)])


def _bce_cost(p: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """cost[j, i]: summed BCE of prediction column i against target column j."""
    lp, lq = safe_log(p, epsilon), safe_log(1.0 - p, epsilon)
    y = y.astype(np.float64)
    return -(y.T @ lp + (1.0 - y).T @ lq)


def align_to_reference(probs: FrameScoreMatrix, targets: BinaryActivityMatrix,
                       epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Prediction column order minimising BCE against the targets.

    The smaller side is padded with all-zero columns, so the result has
    ``max(S_pred, S_ref)`` entries; ``perm[j]`` is the prediction column
    matched to target column ``j``.
    """
    p = _marginal(probs)
    y = targets.values
    if p.shape[0] != y.shape[0]:
        raise ContractError("predictions and targets cover different frame counts")
    width = max(p.shape[1], y.shape[1])
    return best_permutation(_bce_cost(_pad(p, width), _pad(y, width), epsilon))


def targets_for_predictions(probs: FrameScoreMatrix, targets: BinaryActivityMatrix,
                            epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Reference activity reordered to the prediction columns.

    Returns the T x S_pred aligned targets and a per-frame mask of frames where
    more reference speakers are active than the predictions can represent.
    """
    perm = align_to_reference(probs, targets, epsilon)
    s_pred = probs.num_speakers
    y = _pad(targets.values, len(perm))
    aligned = np.zeros((y.shape[0], len(perm)), dtype=np.uint8)
    aligned[:, perm] = y
    overflow = y.sum(axis=1) > s_pred
    if aligned[:, s_pred:].any():
        log.warning("%s: reference has more speakers than the %d predicted; extra speakers dropped",
                    targets.recording_id, s_pred)
    return aligned[:, :s_pred], overflow


def bce_sum(probs: FrameScoreMatrix, targets: BinaryActivityMatrix, align: bool = True,
            epsilon: float = DEFAULT_EPSILON) -> tuple[float, int]:
    """Summed BCE and the number of (frame, speaker) terms."""
    p = _marginal(probs)
    y = targets.values
    if p.shape[0] != y.shape[0]:
        raise ContractError("predictions and targets cover different frame counts")
    width = max(p.shape[1], y.shape[1])
    if not align and p.shape[1] != y.shape[1]:
        raise ContractError("predictions and targets have different speaker counts")
    p, y = _pad(p, width), _pad(y, width)
    cost = _bce_cost(p, y, epsilon)
    perm = best_permutation(cost) if align else np.arange(width)
    return float(cost[np.arange(width), perm].sum()), y.size


def compute_bce(probs: FrameScoreMatrix, targets: BinaryActivityMatrix, align: bool = True,
                epsilon: float = DEFAULT_EPSILON) -> float:
    """Mean per-speaker binary cross-entropy (natural log).

    Powerset predictions are marginalised to speaker probabilities first.
    """
    total, count = bce_sum(probs, targets, align, epsilon)
    return total / count if count else 0.0


@dataclass
class DERReport:
    miss_s: float
    false_alarm_s: float
    confusion_s: float
    scored_speech_s: float
    collar_s: float = 0.0
    mapping: dict = field(default_factory=dict)

    def _pct(self, seconds: float) -> float:
        return 100.0 * seconds / self.scored_speech_s if self.scored_speech_s > 0 else float("nan")

    @property
    def miss_pct(self) -> float:
        return self._pct(self.miss_s)

    @property
    def false_alarm_pct(self) -> float:
        return self._pct(self.false_alarm_s)

    @property
    def confusion_pct(self) -> float:
        return self._pct(self.confusion_s)

    @property
    def der_pct(self) -> float:
        return self._pct(self.miss_s + self.false_alarm_s + self.confusion_s)

    @classmethod
    def combine(cls, reports: list["DERReport"]) -> "DERReport":
        """Time-weighted aggregate over recordings, summed in list order."""
        miss = fa = conf = scored = 0.0
        for r in reports:
            miss += r.miss_s
            fa += r.false_alarm_s
            conf += r.confusion_s
            scored += r.scored_speech_s
        collar = reports[0].collar_s if reports else 0.0
        return cls(miss, fa, conf, scored, collar, {})

    def as_dict(self) -> dict:
        return {
            "der_pct": self.der_pct,
            "miss_pct": self.miss_pct,
            "false_alarm_pct": self.false_alarm_pct,
            "confusion_pct": self.confusion_pct,
            "miss_s": self.miss_s,
            "false_alarm_s": self.false_alarm_s,
            "confusion_s": self.confusion_s,
            "scored_speech_s": self.scored_speech_s,
            "collar_s": self.collar_s,
        }


def _merge_intervals(starts, ends):
    order = np.argsort(starts, kind="stable")
    ms, me = [], []
    for a, b in zip(np.asarray(starts)[order], np.asarray(ends)[order]):
        if ms and a <= me[-1]:
            me[-1] = max(me[-1], b)
        else:
            ms.append(a)
            me.append(b)
    return np.array(ms), np.array(me)


def speaker_overlap(ref: Annotation, hyp: Annotation, collar_s: float = 0.0,
                    score_overlap: bool = True):
    """Elementary scoring intervals of a ref/hyp pair.

    Returns ``(durations, ref_active, hyp_active, ref_ids, hyp_ids)`` where the
    activity matrices are boolean (intervals x speakers) and durations are
    zero on unscored intervals.
    """
    ref_tl, hyp_tl = ref.timelines(), hyp.timelines()
    ref_ids, hyp_ids = list(ref_tl), list(hyp_tl)
    points = [np.array([0.0])]
    for st, en in list(ref_tl.values()) + list(hyp_tl.values()):
        points += [st, en]
    nsz = None
    if collar_s > 0 and ref_tl:
        bounds = np.concatenate([np.concatenate([st, en]) for st, en in ref_tl.values()])
        nsz = _merge_intervals(bounds - collar_s, bounds + collar_s)
        points += [np.clip(nsz[0], 0.0, None), nsz[1]]
    pts = np.unique(np.concatenate(points))
    if pts.size < 2:
        empty = np.zeros((0,))
        return empty, np.zeros((0, len(ref_ids)), bool), np.zeros((0, len(hyp_ids)), bool), ref_ids, hyp_ids
    mids = 0.5 * (pts[:-1] + pts[1:])
    dur = np.diff(pts)
    r = np.stack([_active(*ref_tl[s], mids) for s in ref_ids], axis=1) if ref_ids \
        else np.zeros((mids.size, 0), bool)
    h = np.stack([_active(*hyp_tl[s], mids) for s in hyp_ids], axis=1) if hyp_ids \
        else np.zeros((mids.size, 0), bool)
    scored = np.ones(mids.size, dtype=bool)
    if nsz is not None:
        scored &= ~_active(nsz[0], nsz[1], mids)
    if not score_overlap:
        scored &= r.sum(axis=1) <= 1
    return dur * scored, r, h, ref_ids, hyp_ids


def optimal_mapping(overlap: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one ref/hyp pairs maximising total overlap.

    Pairs overlapping by less than ``TOUCH_TOL_S`` (float slivers) are dropped.
    """
    if overlap.size == 0:
        return []
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if overlap[i, j] > TOUCH_TOL_S]


def compute_der(ref: Annotation, hyp: Annotation, collar_s: float = 0.25,
                score_overlap: bool = True) -> DERReport:
    """Diarization error rate with miss / false alarm / confusion breakdown.

    Reference and hypothesis speakers are paired one-to-one by the Hungarian
    algorithm on the scored overlap-duration matrix.  A ``collar_s`` margin
    either side of every reference boundary is excluded from scoring.
    """
    if collar_s < 0:
        raise ValueError("collar must be >= 0")
    dur, r, h, ref_ids, hyp_ids = speaker_overlap(ref, hyp, collar_s, score_overlap)
    rf, hf = r.astype(np.float64), h.astype(np.float64)
    overlap = rf.T @ (hf * dur[:, None])
    pairs = optimal_mapping(overlap)
    n_ref, n_hyp = rf.sum(axis=1), hf.sum(axis=1)
    correct = np.zeros_like(n_ref)
    for i, j in pairs:
        correct += rf[:, i] * hf[:, j]
    scored_speech = float(dur @ n_ref)
    if not scored_speech > 0:
        raise ContractError(f"{ref.recording_id}: no scored reference speech, DER undefined")
    return DERReport(
        miss_s=float(dur @ np.maximum(n_ref - n_hyp, 0.0)),
        false_alarm_s=float(dur @ np.maximum(n_hyp - n_ref, 0.0)),
        confusion_s=float(dur @ (np.minimum(n_ref, n_hyp) - correct)),
        scored_speech_s=scored_speech,
        collar_s=collar_s,
        mapping={ref_ids[i]: hyp_ids[j] for i, j in pairs},
    )


@dataclass
class ExperimentResult:
    condition: str
    method: str
    strategy: str
    der: DERReport
    bce: float


TABLE_COLUMNS = ("condition", "method", "strategy", "DER", "BCE", "miss", "FA", "conf")


def _rows(results: list[ExperimentResult]) -> list[list[str]]:
    ordered = sorted(results, key=lambda r: (r.condition, r.method))
    return [
        [r.condition, r.method, r.strategy, f"{r.der.der_pct:.3f}", f"{r.bce:.3f}",
         f"{r.der.miss_pct:.3f}", f"{r.der.false_alarm_pct:.3f}", f"{r.der.confusion_pct:.3f}"]
        for r in ordered
    ]


def report_table(results: list[ExperimentResult]) -> str:
    rows = [list(TABLE_COLUMNS)] + _rows(results)
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for n, row in enumerate(rows):
        cells = [c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_csv(results: list[ExperimentResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    writer.writerows(_rows(results))
    return buf.getvalue()
