"""RTTM and score-file formats, JSON model documents and data configs."""
from __future__ import annotations

import gzip
import io as stdio
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibrationModel
from .core import (
    LOGIT,
    MULTILABEL,
    POWERSET,
    PROBABILITY,
    ContractError,
    FrameScoreMatrix,
)
from .evaluation import Annotation
from .fusion import MetaLearnerModel
from .pipeline import PipelineConfig, Recording, TrainedPipeline

log = logging.getLogger(__name__)

SCORES_MAGIC = "#diacal-scores v1"
RENORM_TOL = 1e-6

_KIND_CODES = {PROBABILITY: "prob", LOGIT: "logit"}
_SPACE_CODES = {MULTILABEL: "mult", POWERSET: "power"}
_KINDS = {v: k for k, v in _KIND_CODES.items()}
_SPACES = {v: k for k, v in _SPACE_CODES.items()}


class FormatError(ContractError):
    """A file does not follow its declared format."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def _open_text(path, mode: str):
    path = str(path)
    if not path.endswith(".gz"):
        return open(path, mode, encoding="utf-8", newline="\n")
    if "w" in mode:
        # no embedded file name or timestamp, so output bytes depend on content only
        raw = gzip.GzipFile(filename="", mode="wb", fileobj=open(path, "wb"), mtime=0)
        return _ClosingText(raw)
    return gzip.open(path, "rt", encoding="utf-8")


class _ClosingText(stdio.TextIOWrapper):
    """Text wrapper that also closes the file object under a GzipFile."""

    def __init__(self, raw: gzip.GzipFile):
        super().__init__(raw, encoding="utf-8", newline="\n")
        self._fileobj = raw.fileobj

    def close(self):
        super().close()
        self._fileobj.close()


# ---------------------------------------------------------------- RTTM

def _fmt_time(x: float) -> str:
    return f"{x:.3f}"


def parse_rttm(lines, source="<rttm>") -> list[Annotation]:
    """Annotations from RTTM lines, in order of first appearance per recording."""
    segments: dict[str, list] = {}
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if fields[0] != "SPEAKER":
            log.warning("%s:%d: skipping %s line", source, lineno, fields[0])
            continue
        if len(fields) < 8:
            raise FormatError(source, lineno, f"SPEAKER line has {len(fields)} fields, expected 10")
        rec, spk = fields[1], fields[7]
        try:
            onset, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise FormatError(source, lineno, f"bad onset/duration {fields[3]!r} {fields[4]!r}") from None
        if not (np.isfinite(onset) and np.isfinite(dur)) or onset < 0 or dur <= 0:
            raise FormatError(source, lineno, f"invalid segment onset={onset} duration={dur}")
        segments.setdefault(rec, []).append((spk, onset, dur))
    return [Annotation(rec, segs) for rec, segs in segments.items()]


def read_rttm(path) -> list[Annotation]:
    with _open_text(path, "r") as f:
        return parse_rttm(f, source=path)


def format_rttm(annotations) -> str:
    out = []
    for ann in annotations:
        for spk, onset, dur in ann.canonical().segments:
            if round(dur, 3) <= 0:
                raise ContractError(
                    f"{ann.recording_id}: segment of {dur}s for {spk} vanishes at millisecond precision")
            out.append(f"SPEAKER {ann.recording_id} 1 {_fmt_time(onset)} {_fmt_time(dur)} "
                       f"<NA> <NA> {spk} <NA> <NA>\n")
    return "".join(out)


def write_rttm(annotations, path) -> None:
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    text = format_rttm(annotations)
    with _open_text(path, "w") as f:
        f.write(text)


# ---------------------------------------------------------------- score files

@dataclass
class ScoreFileHeader:
    frames: int
    speakers: int
    rate_hz: float
    kind: str
    space: str
    system: str = ""
    recording: str = ""

    @property
    def dim(self) -> int:
        return self.speakers if self.space == MULTILABEL else 2 ** self.speakers

    def format(self) -> str:
        return (f"frames={self.frames} speakers={self.speakers} rate_hz={self.rate_hz:.17g} "
                f"kind={_KIND_CODES[self.kind]} space={_SPACE_CODES[self.space]} "
                f"system={self.system} recording={self.recording}")

    @classmethod
    def parse(cls, line: str, source="<scores>", lineno: int = 2) -> "ScoreFileHeader":
        kv = {}
        for tok in line.split():
            key, sep, value = tok.partition("=")
            if not sep:
                raise FormatError(source, lineno, f"header token {tok!r} is not key=value")
            kv[key] = value
        missing = {"frames", "speakers", "rate_hz", "kind", "space"} - set(kv)
        if missing:
            raise FormatError(source, lineno, f"header lacks {sorted(missing)}")
        try:
            frames, speakers, rate = int(kv["frames"]), int(kv["speakers"]), float(kv["rate_hz"])
        except ValueError as exc:
            raise FormatError(source, lineno, f"bad header value: {exc}") from None
        if kv["kind"] not in _KINDS or kv["space"] not in _SPACES:
            raise FormatError(source, lineno, f"unknown kind/space {kv['kind']!r}/{kv['space']!r}")
        if frames < 0 or speakers < 1 or not rate > 0:
            raise FormatError(source, lineno, "frames, speakers and rate_hz must be positive")
        return cls(frames, speakers, rate, _KINDS[kv["kind"]], _SPACES[kv["space"]],
                   kv.get("system", ""), kv.get("recording", ""))


def format_scores(m: FrameScoreMatrix, system: str = "", precision: int = 17) -> str:
    if precision < 9:
        raise ValueError("score files need at least 9 significant digits")
    for name, value in (("system", system), ("recording", m.recording_id)):
        if any(c.isspace() for c in value):
            raise ContractError(f"{name} id {value!r} contains whitespace")
    header = ScoreFileHeader(m.num_frames, m.num_speakers, m.frame_rate_hz, m.kind, m.space,
                             system, m.recording_id)
    fmt = f"%.{precision}g"
    rows = "".join(" ".join(fmt % v for v in row) + "\n" for row in m.values)
    return f"{SCORES_MAGIC}\n{header.format()}\n{rows}"


def write_scores(m: FrameScoreMatrix, path, system: str = "", precision: int = 17) -> None:
    text = format_scores(m, system, precision)
    with _open_text(path, "w") as f:
        f.write(text)


def parse_scores(lines, source="<scores>") -> tuple[ScoreFileHeader, FrameScoreMatrix]:
    it = iter(lines)
    first = next(it, "").strip()
    if first != SCORES_MAGIC:
        raise FormatError(source, 1, f"expected {SCORES_MAGIC!r}, got {first[:40]!r}")
    header = ScoreFileHeader.parse(next(it, ""), source)
    d = header.dim
    rows = []
    for lineno, line in enumerate(it, start=3):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split()]
        except ValueError:
            raise FormatError(source, lineno, "non-numeric score") from None
        if len(row) != d:
            raise FormatError(source, lineno, f"{len(row)} columns, {header.space} space with "
                                              f"S={header.speakers} needs {d}")
        rows.append(row)
    if len(rows) != header.frames:
        raise FormatError(source, None, f"header declares {header.frames} frames, found {len(rows)}")
    values = np.array(rows, dtype=np.float64).reshape(header.frames, d)
    if header.kind == PROBABILITY and header.space == POWERSET and header.frames:
        sums = values.sum(axis=1)
        dev = np.abs(sums - 1.0).max()
        if dev > RENORM_TOL:
            raise FormatError(source, None, f"powerset rows deviate from 1 by {dev:.3g}")
        if values.min() >= 0:
            values = values / sums[:, None]
    try:
        m = FrameScoreMatrix(values, header.kind, header.space, header.speakers,
                             header.rate_hz, header.recording)
    except ContractError as exc:
        raise FormatError(source, None, str(exc)) from None
    return header, m


def load_scores(path) -> tuple[ScoreFileHeader, FrameScoreMatrix]:
    with _open_text(path, "r") as f:
        return parse_scores(f, source=path)


def read_scores(path) -> FrameScoreMatrix:
    return load_scores(path)[1]


# ---------------------------------------------------------------- JSON documents

def dump_json(doc, path) -> None:
    text = json.dumps(doc, indent=2, allow_nan=False) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _load_json(path):
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None


def save_model(model, path) -> None:
    dump_json(model.to_dict(), path)


def load_model(path):
    """Calibration model, metalearner or trained pipeline, by document shape."""
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise FormatError(path, None, "model document must be a JSON object")
    if doc.get("format", "").startswith("diacal-pipeline"):
        return TrainedPipeline.from_dict(doc)
    if "strategy" in doc:
        return CalibrationModel.from_dict(doc)
    if "system_ids" in doc and "weights" in doc:
        return MetaLearnerModel.from_dict(doc)
    raise FormatError(path, None, "unrecognised model document")


def _load_typed(path, cls):
    model = load_model(path)
    if not isinstance(model, cls):
        raise ContractError(f"{path} holds a {type(model).__name__}, expected {cls.__name__}")
    return model


def load_calibration(path) -> CalibrationModel:
    return _load_typed(path, CalibrationModel)


def load_metalearner(path) -> MetaLearnerModel:
    return _load_typed(path, MetaLearnerModel)


def load_pipeline(path) -> TrainedPipeline:
    return _load_typed(path, TrainedPipeline)


# ---------------------------------------------------------------- data configs

@dataclass
class DataConfig:
    """Score files per system and recording, a reference RTTM and pipeline configs.

    Relative paths resolve against the directory of the config file.
    """

    systems: dict  # system id -> {recording id -> path}
    reference: str | None = None
    configs: list = field(default_factory=list)
    train: list | None = None
    test: list | None = None
    base_dir: str = "."

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "DataConfig":
        if not isinstance(doc, dict) or not isinstance(doc.get("systems"), dict) or not doc["systems"]:
            raise ContractError("data config needs a non-empty 'systems' object")
        configs = [c if isinstance(c, PipelineConfig) else PipelineConfig.from_dict(c)
                   for c in doc.get("configs", [])]
        return cls(
            systems={s: dict(recs) for s, recs in doc["systems"].items()},
            reference=doc.get("reference"),
            configs=configs,
            train=doc.get("train"),
            test=doc.get("test"),
            base_dir=str(base_dir),
        )

    @classmethod
    def load(cls, path) -> "DataConfig":
        doc = _load_json(path)
        return cls.from_dict(doc, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        doc = {"systems": self.systems}
        if self.reference is not None:
            doc["reference"] = self.reference
        if self.train is not None:
            doc["train"] = list(self.train)
        if self.test is not None:
            doc["test"] = list(self.test)
        doc["configs"] = [c.to_dict() for c in self.configs]
        return doc

    def resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def system_ids(self) -> list[str]:
        return list(self.systems)

    def recording_ids(self, split: str = "all") -> list[str]:
        anchor = self.systems[self.system_ids[0]]
        if split == "all":
            return list(anchor)
        ids = getattr(self, split, None) if split in ("train", "test") else None
        if ids is None:
            raise ContractError(f"data config has no {split!r} recording list")
        return list(ids)

    def config(self, name: str | None = None) -> PipelineConfig:
        if not self.configs:
            raise ContractError("data config lists no pipeline configs")
        if name is None:
            if len(self.configs) > 1:
                raise ContractError("several pipeline configs defined; select one by name")
            return self.configs[0]
        for c in self.configs:
            if c.name == name:
                return c
        raise ContractError(f"no pipeline config named {name!r}; have {[c.name for c in self.configs]}")

    def references(self) -> dict[str, Annotation]:
        if self.reference is None:
            return {}
        return {a.recording_id: a for a in read_rttm(self.resolve(self.reference))}

    def load_recordings(self, split: str = "all", need_reference: bool = False) -> list[Recording]:
        refs = self.references()
        if need_reference and self.reference is None:
            raise ContractError("data config has no reference RTTM")
        out = []
        for rec_id in self.recording_ids(split):
            systems = {}
            for sys_id, files in self.systems.items():
                if rec_id not in files:
                    raise ContractError(f"system {sys_id} has no scores for {rec_id}")
                header, m = load_scores(self.resolve(files[rec_id]))
                if header.recording and header.recording != rec_id:
                    raise ContractError(f"{files[rec_id]} holds recording {header.recording}, "
                                        f"listed as {rec_id}")
                systems[sys_id] = m.replace(recording_id=rec_id)
            # recordings without reference lines are silent
            ann = refs.get(rec_id, Annotation(rec_id)) if self.reference is not None else None
            out.append(Recording(rec_id, systems, ann))
        return out


def relpath(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()
