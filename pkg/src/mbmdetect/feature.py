"""Macroblock-mode instability features.

Two macroblocks at the same (frame, row, col) position in consecutive
generations are *stable* when their modes match.  ``compute_vi`` averages the
number of unstable macroblocks over the P-frames of the earlier generation;
``compute_feature_vector`` stacks those averages along a recompression ladder.
"""
from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyTrainingSet,
    FrameCountMismatch,
    LengthMismatch,
    NoPFrames,
    ScalingMismatch,
)
from .extract import FrameGrid, FrameType, MacroblockMode


class VideoClass(enum.IntEnum):
    ORIGINAL = 0
    DOUBLE = 1
    TRIPLE = 2

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "VideoClass":
        text = text.strip().lower()
        aliases = {"doublecompressed": "double", "triplecompressed": "triple"}
        text = aliases.get(text, text)
        if text.isdigit():
            return cls(int(text))
        return cls[text.upper()]


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    scaled: bool = False
    label: VideoClass | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.label is not None:
            object.__setattr__(self, "label", VideoClass(self.label))

    @property
    def n(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def with_label(self, label) -> "FeatureVector":
        return FeatureVector(self.values, self.scaled, label)


def mbm_equal(a: MacroblockMode, b: MacroblockMode) -> bool:
    """Mode equality: same type, and for types that carry vectors the same
    canonical vector list.  Skipped and intra blocks ignore their vectors."""
    if a.mb_type != b.mb_type:
        return False
    if not a.mb_type.carries_mvs:
        return True
    return a.mvs == b.mvs


def indicator(a: MacroblockMode, b: MacroblockMode) -> int:
    """1 for an unstable position, 0 for a stable one."""
    return 0 if mbm_equal(a, b) else 1


def _check_pair(gen_a: Sequence[FrameGrid], gen_b: Sequence[FrameGrid]):
    if len(gen_a) != len(gen_b):
        raise FrameCountMismatch(f"{len(gen_a)} frames vs {len(gen_b)} frames")
    for fa, fb in zip(gen_a, gen_b):
        if (fa.rows, fa.cols) != (fb.rows, fb.cols):
            raise DimensionMismatch(
                f"frame {fa.frame_index}: {fa.rows}x{fa.cols} vs {fb.rows}x{fb.cols}")


def unstable_counts(gen_a: Sequence[FrameGrid], gen_b: Sequence[FrameGrid]) -> list[int]:
    """Unstable-macroblock count of every P-frame of ``gen_a`` (paired by index)."""
    _check_pair(gen_a, gen_b)
    counts = []
    for fa, fb in zip(gen_a, gen_b):
        if fa.frame_type is not FrameType.P:
            continue
        total = 0
        for ra, rb in zip(fa.cells, fb.cells):
            for a, b in zip(ra, rb):
                total += indicator(a, b)
        counts.append(total)
    return counts


def compute_vi(gen_a: Sequence[FrameGrid], gen_b: Sequence[FrameGrid]) -> float:
    """Average number of unstable macroblocks per P-frame between two
    consecutive generations.  The P-frame set is taken from ``gen_a``."""
    counts = unstable_counts(gen_a, gen_b)
    if not counts:
        raise NoPFrames("the earlier generation has no P-frames")
    return sum(counts) / len(counts)


def compute_feature_vector(ladder, n: int) -> FeatureVector:
    """``values[i] = compute_vi(generation i, generation i+1)`` for i < n.

    ``ladder`` is a :class:`~mbmdetect.codec.RecompressionLadder` or an
    already parsed list of generations (each a list of FrameGrid).
    """
    generations = ladder.grids() if hasattr(ladder, "grids") else list(ladder)
    if len(generations) < n + 1:
        raise ValueError(f"need {n + 1} generations, ladder has {len(generations)}")
    return FeatureVector(tuple(compute_vi(generations[i], generations[i + 1]) for i in range(n)))


# --------------------------------------------------------------------------
# scaling

@dataclass(frozen=True)
class FeatureScaler:
    """Per-dimension standardisation fitted on a training set."""

    location: tuple[float, ...]
    spread: tuple[float, ...]
    method: str = "standard"

    @property
    def dim(self) -> int:
        return len(self.location)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.location)) / np.asarray(self.spread)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * np.asarray(self.spread) + np.asarray(self.location)


def fit_scaler(training: Iterable[FeatureVector]) -> FeatureScaler:
    training = list(training)
    if not training:
        raise EmptyTrainingSet("cannot fit a scaler on no vectors")
    lengths = {v.n for v in training}
    if len(lengths) > 1:
        raise LengthMismatch(f"training vectors have lengths {sorted(lengths)}")
    if any(v.scaled for v in training):
        raise ScalingMismatch("scaler must be fitted on unscaled vectors")
    X = np.array([v.values for v in training], dtype=np.float64)
    loc = X.mean(axis=0)
    spread = X.std(axis=0)
    # constant dimensions get unit spread
    spread = np.where(spread > 1e-12 * np.maximum(1.0, np.abs(loc)), spread, 1.0)
    return FeatureScaler(tuple(loc.tolist()), tuple(spread.tolist()))


def apply_scaler(scaler: FeatureScaler, v: FeatureVector) -> FeatureVector:
    if v.n != scaler.dim:
        raise LengthMismatch(f"vector has {v.n} entries, scaler expects {scaler.dim}")
    if v.scaled:
        raise ScalingMismatch("vector is already scaled")
    return FeatureVector(tuple(scaler.transform(v.values).tolist()), True, v.label)


# --------------------------------------------------------------------------
# persistence: label,v0,v1[,v2] with 6 fractional digits + a sidecar

def format_features_csv(vectors: Iterable[FeatureVector]) -> str:
    vectors = list(vectors)
    n = vectors[0].n if vectors else 2
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label"] + [f"v{i}" for i in range(n)])
    for v in vectors:
        if v.n != n:
            raise LengthMismatch("all vectors in one CSV must have the same length")
        label = "" if v.label is None else str(int(v.label))
        writer.writerow([label] + [f"{x:.6f}" for x in v.values])
    return buf.getvalue()


def parse_features_csv(text: str, scaled: bool = False) -> list[FeatureVector]:
    rows = list(csv.reader(line for line in text.splitlines() if line.strip()))
    if not rows:
        return []
    header = rows[0]
    if header[0] != "label" or header[1:] != [f"v{i}" for i in range(len(header) - 1)]:
        raise ValueError(f"bad feature CSV header {header}")
    out = []
    for row in rows[1:]:
        label = VideoClass(int(row[0])) if row[0] else None
        out.append(FeatureVector(tuple(float(x) for x in row[1:]), scaled, label))
    return out


def write_features(path: str | os.PathLike, vectors: Iterable[FeatureVector], *,
                   scaler: FeatureScaler | None = None, tool_version: str = "",
                   config: dict | None = None) -> Path:
    """Write the feature CSV and its ``.meta`` sidecar."""
    vectors = list(vectors)
    path = Path(path)
    path.write_text(format_features_csv(vectors))
    n = vectors[0].n if vectors else 0
    lines = [f"n: {n}",
             f"scaled: {str(bool(vectors and vectors[0].scaled)).lower()}",
             f"scaling_method: {scaler.method if scaler else 'none'}"]
    if scaler:
        lines.append("scaler_location: " + " ".join(f"{x:.17g}" for x in scaler.location))
        lines.append("scaler_spread: " + " ".join(f"{x:.17g}" for x in scaler.spread))
    lines.append(f"tool_version: {tool_version}")
    for key, value in sorted((config or {}).items()):
        lines.append(f"encode.{key}: {value}")
    sidecar = path.with_name(path.name + ".meta")
    sidecar.write_text("\n".join(lines) + "\n")
    return path


def read_features(path: str | os.PathLike) -> list[FeatureVector]:
    path = Path(path)
    scaled = False
    sidecar = path.with_name(path.name + ".meta")
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            if line.startswith("scaled:"):
                scaled = line.split(":", 1)[1].strip() == "true"
    return parse_features_csv(path.read_text(), scaled)
