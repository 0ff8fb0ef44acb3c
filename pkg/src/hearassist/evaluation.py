"""Dataset ingest, stratified 60/20/20 split, emergency grouping and metrics.

The positive class throughout is ``emergency``: a false positive is a
spurious alarm.  Metrics are counted per clip after a majority vote over the
clip's 2-second chunks (ties resolve to ``emergency``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio_io import AudioSourceConfig, WavError, chunk_stream, load_wav, scale_volume
from .classifier import ModelParams, predict_batch
from .features import FeatureConfig, SpectrogramImage, spectrogram_image

EMERGENCY = "emergency"
NON_EMERGENCY = "non-emergency"
BINARY_LABELS = (EMERGENCY, NON_EMERGENCY)
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledClip:
    path: Path
    class_name: str
    samples: np.ndarray
    sample_rate_hz: int
    split: str = "unassigned"
    label: str | None = None  # binary label after grouping


@dataclass(frozen=True)
class BinaryGrouping:
    positive_classes: frozenset[str]

    def __post_init__(self):
        if not self.positive_classes:
            raise DatasetError("grouping needs at least one positive class")
        object.__setattr__(self, "positive_classes", frozenset(self.positive_classes))

    def label_for(self, class_name: str) -> str:
        return EMERGENCY if class_name in self.positive_classes else NON_EMERGENCY

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "BinaryGrouping":
        names = [ln.strip() for ln in Path(path).read_text().splitlines()]
        return cls(frozenset(n for n in names if n and not n.startswith("#")))

    def to_text(self) -> str:
        return "".join(f"{name}\n" for name in sorted(self.positive_classes))


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    false_positive_rate: float
    confusion: Confusion
    n_samples: int

    @classmethod
    def from_confusion(cls, c: Confusion) -> "MetricsReport":
        n = c.total
        acc = (c.tp + c.tn) / n if n else 0.0
        negatives = c.fp + c.tn
        fpr = c.fp / negatives if negatives else 0.0
        return cls(acc, fpr, c, n)

    def to_dict(self) -> dict:
        c = self.confusion
        return {
            "accuracy": self.accuracy,
            "false_positive_rate": self.false_positive_rate,
            "confusion": {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["accuracy"], d["false_positive_rate"], Confusion(**d["confusion"]), d["n_samples"])


def confusion_from_labels(truth: Sequence[str], predicted: Sequence[str]) -> Confusion:
    if len(truth) != len(predicted):
        raise ValueError("truth and predictions differ in length")
    tp = fp = tn = fn = 0
    for t, p in zip(truth, predicted):
        if p == EMERGENCY:
            if t == EMERGENCY:
                tp += 1
            else:
                fp += 1
        elif t == EMERGENCY:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, tn, fn)


def metrics_from_labels(truth: Sequence[str], predicted: Sequence[str]) -> MetricsReport:
    return MetricsReport.from_confusion(confusion_from_labels(truth, predicted))


# --------------------------------------------------------------------------
# Dataset handling


def scan_dataset(root: str | os.PathLike, sample_rate_hz: int = 16000) -> list[LabeledClip]:
    """Load ``<root>/<class>/*.wav``; deeper directories are ignored."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class directories")
    clips = []
    for class_dir in class_dirs:
        wavs = sorted(p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() == ".wav")
        loaded = []
        for wav in wavs:
            try:
                samples, rate = load_wav(wav, sample_rate_hz)
            except WavError:
                continue
            loaded.append(LabeledClip(wav, class_dir.name, samples, rate))
        if not loaded:
            raise DatasetError(f"{class_dir}: no readable WAV files")
        clips.extend(loaded)
    clips.sort(key=lambda c: str(c.path))
    return clips


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(m: int) -> tuple[int, int, int]:
    n_train, n_val = _half_up(0.6 * m), _half_up(0.2 * m)
    return n_train, n_val, m - n_train - n_val


def split_dataset(clips: Sequence[LabeledClip], seed: int = 0, min_per_class: int = 5) -> list[LabeledClip]:
    """Stratified 60/20/20 assignment; returns new clip objects."""
    by_class: dict[str, list[LabeledClip]] = {}
    for clip in sorted(clips, key=lambda c: str(c.path)):
        by_class.setdefault(clip.class_name, []).append(clip)
    rng = np.random.default_rng(seed)
    assigned = {}
    for name in sorted(by_class):
        members = by_class[name]
        if len(members) < min_per_class:
            raise DatasetError(f"class {name!r} has {len(members)} clips; need at least {min_per_class}")
        n_train, n_val, _ = split_sizes(len(members))
        for rank, i in enumerate(rng.permutation(len(members))):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assigned[id(members[i])] = replace(members[i], split=split)
    return [assigned[id(c)] for c in clips]


def apply_grouping(clips: Sequence[LabeledClip], grouping: BinaryGrouping) -> list[LabeledClip]:
    present = {c.class_name for c in clips}
    missing = grouping.positive_classes - present
    if missing:
        raise DatasetError(f"positive classes not in dataset: {sorted(missing)}")
    return [replace(c, label=grouping.label_for(c.class_name)) for c in clips]


def select(clips: Iterable[LabeledClip], split: str) -> list[LabeledClip]:
    return [c for c in clips if c.split == split]


# --------------------------------------------------------------------------
# Featurization and evaluation


def clip_images(
    clip: LabeledClip,
    feature_config: FeatureConfig,
    chunk_duration_s: float = 2.0,
    gain: float = 1.0,
) -> list[SpectrogramImage]:
    source = AudioSourceConfig(chunk_duration_s=chunk_duration_s, target_sample_rate_hz=clip.sample_rate_hz)
    samples = scale_volume(clip.samples, gain) if gain != 1.0 else clip.samples
    return [spectrogram_image(ch, feature_config) for ch in chunk_stream(samples, source)]


def chunk_dataset(
    clips: Sequence[LabeledClip],
    feature_config: FeatureConfig,
    label_names: Sequence[str] = BINARY_LABELS,
    chunk_duration_s: float = 2.0,
) -> list[tuple[SpectrogramImage, int]]:
    """Every chunk image of every clip, paired with the index of the clip's binary label."""
    out = []
    for clip in clips:
        if clip.label is None:
            raise DatasetError(f"{clip.path}: clip has no binary label; apply a grouping first")
        y = list(label_names).index(clip.label)
        out.extend((img, y) for img in clip_images(clip, feature_config, chunk_duration_s))
    return out


def majority_vote(labels: Sequence[str]) -> str:
    if not labels:
        raise DatasetError("cannot vote over zero chunks")
    positives = sum(1 for lab in labels if lab == EMERGENCY)
    return EMERGENCY if positives * 2 >= len(labels) else NON_EMERGENCY


def to_binary(label: str, grouping: BinaryGrouping | None = None) -> str:
    if label in BINARY_LABELS:
        return label
    if grouping is not None:
        return grouping.label_for(label)
    raise DatasetError(f"cannot map model label {label!r} to emergency/non-emergency")


@dataclass
class ClipOutcome:
    path: str
    truth: str
    predicted: str
    chunk_labels: list[str] = field(default_factory=list)


def predict_clips(
    model: ModelParams,
    clips: Sequence[LabeledClip],
    feature_config: FeatureConfig,
    gain: float = 1.0,
    grouping: BinaryGrouping | None = None,
    chunk_duration_s: float = 2.0,
) -> list[ClipOutcome]:
    outcomes = []
    for clip in clips:
        if clip.label is None:
            raise DatasetError(f"{clip.path}: clip has no binary label; apply a grouping first")
        images = clip_images(clip, feature_config, chunk_duration_s, gain)
        if not images:
            raise DatasetError(f"{clip.path}: clip shorter than one chunk")
        chunk_labels = [to_binary(p.label, grouping) for p in predict_batch(model, images)]
        outcomes.append(ClipOutcome(str(clip.path), clip.label, majority_vote(chunk_labels), chunk_labels))
    return outcomes


def evaluate(
    model: ModelParams,
    clips: Sequence[LabeledClip],
    feature_config: FeatureConfig,
    gain: float = 1.0,
    grouping: BinaryGrouping | None = None,
    chunk_duration_s: float = 2.0,
) -> MetricsReport:
    outcomes = predict_clips(model, clips, feature_config, gain, grouping, chunk_duration_s)
    return metrics_from_labels([o.truth for o in outcomes], [o.predicted for o in outcomes])


def volume_sweep(
    model: ModelParams,
    clips: Sequence[LabeledClip],
    gains: Sequence[float],
    feature_config: FeatureConfig,
    grouping: BinaryGrouping | None = None,
    chunk_duration_s: float = 2.0,
) -> list[tuple[float, MetricsReport]]:
    if not gains:
        raise ValueError("need at least one gain")
    if any(g < 0 for g in gains):
        raise ValueError("gains must be non-negative")
    return [(g, evaluate(model, clips, feature_config, g, grouping, chunk_duration_s)) for g in gains]


# --------------------------------------------------------------------------
# Report files

CSV_FIELDS = ("accuracy", "false_positive_rate", "tp", "fp", "tn", "fn", "n_samples")


def report_to_csv(report: MetricsReport) -> str:
    c = report.confusion
    row = [report.accuracy, report.false_positive_rate, c.tp, c.fp, c.tn, c.fn, report.n_samples]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def emit_report(report: MetricsReport, path: str | os.PathLike, format: str = "json") -> Path:
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    elif format == "csv":
        path.write_text(report_to_csv(report))
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def sweep_to_csv(rows: Sequence[tuple[float, MetricsReport]], gain_text: Sequence[str] | None = None) -> str:
    """CSV ``gain,accuracy,fpr``; ``gain_text`` lets callers echo the gains as typed."""
    gains = list(gain_text) if gain_text is not None else [repr(g) for g, _ in rows]
    lines = ["gain,accuracy,fpr"]
    lines += [f"{g},{r.accuracy!r},{r.false_positive_rate!r}" for g, (_, r) in zip(gains, rows)]
    return "\n".join(lines) + "\n"
