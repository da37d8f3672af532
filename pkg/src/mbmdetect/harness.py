"""Corpus-level experiments: manifests, cached feature extraction, train and
predict splits, confusion matrices and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import EncodeConfig, build_ladder, find_tool, tool_version
from .errors import InsufficientTrainingData
from .feature import FeatureVector, VideoClass, apply_scaler, compute_feature_vector, fit_scaler
from .svm import (
    GridSearchResult,
    SvmModel,
    default_c_grid,
    default_gamma_grid,
    grid_search,
    train_multiclass,
)
from .synth import make_clip

logger = logging.getLogger(__name__)

RESOLUTION_TAGS = {
    (720, 480): "720x480",
    (720, 1280): "720x1280",
    (1920, 1080): "1920x1080",
    (3840, 2160): "4K",
}
VALID_TAGS = set(RESOLUTION_TAGS.values()) | {"other"}
SPLITS = ("train", "predict")


def resolution_tag(width: int, height: int) -> str:
    return RESOLUTION_TAGS.get((width, height), "other")


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: VideoClass
    resolution: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if e.resolution not in VALID_TAGS:
                raise ValueError(f"{e.path}: unknown resolution tag {e.resolution!r}")
            if e.split not in SPLITS:
                raise ValueError(f"{e.path}: split must be train or predict, not {e.split!r}")
        train = {e.path for e in self.split("train")}
        both = train & {e.path for e in self.split("predict")}
        if both:
            raise ValueError(f"{sorted(both)[0]} is in both the train and predict splits")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def filtered(self, resolution: str | None) -> "DatasetManifest":
        if resolution is None:
            return self
        return DatasetManifest([e for e in self.entries if e.resolution == resolution], self.notes)

    def to_csv(self, base: Path | None = None) -> str:
        buf = io.StringIO()
        for note in self.notes:
            buf.write(f"# {note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "class", "resolution", "split"])
        for e in self.entries:
            p = os.path.relpath(e.path, base) if base else str(e.path)
            w.writerow([p, e.label.slug, e.resolution, e.split])
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(path.parent.resolve()))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        """Read a manifest; relative video paths resolve against its directory."""
        path = Path(path)
        notes, body = [], []
        for line in path.read_text().splitlines():
            if line.startswith("#"):
                notes.append(line[1:].strip())
            elif line.strip():
                body.append(line)
        rows = list(csv.DictReader(body))
        entries = []
        for row in rows:
            video = Path(row["path"])
            if not video.is_absolute():
                video = (path.parent / video).resolve()
            if not video.exists():
                raise FileNotFoundError(f"manifest {path}: {video} does not exist")
            entries.append(ManifestEntry(video, VideoClass.parse(row["class"]),
                                         row["resolution"], row["split"]))
        return cls(entries, notes)


def _synth_job(args):
    dst, seed, encodes, config, w, h, frames, fps, tool = args
    make_clip(dst, seed, encodes, EncodeConfig.from_mapping(config), w, h, frames, fps, tool)
    return dst


def synthesize_corpus(out_dir: str | os.PathLike, counts: dict, resolutions: Sequence = ((320, 240),),
                      seed: int = 0, config: EncodeConfig | None = None, frames: int = 60,
                      fps: int = 30, predict_fraction: float = 0.5, jobs: int = 1,
                      tool: str | None = None) -> DatasetManifest:
    """Generate a labelled corpus of procedural clips and write ``manifest.csv``.

    ``counts`` maps each class (VideoClass or its name) to the number of clips
    per resolution.  Within every (resolution, class) group a seeded shuffle
    sends ``predict_fraction`` of the clips to the predict split.
    """
    config = config or EncodeConfig()
    tool = find_tool(tool)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {VideoClass.parse(k) if isinstance(k, str) else VideoClass(k): int(v)
              for k, v in counts.items()}
    entries, jobs_args = [], []
    split_rng = np.random.default_rng([seed, 1])
    for r, (w, h) in enumerate(resolutions):
        tag = resolution_tag(w, h)
        for cls, count in sorted(counts.items()):
            n_predict = int(round(count * predict_fraction))
            to_predict = set(split_rng.permutation(count)[:n_predict].tolist())
            for i in range(count):
                dst = out_dir / f"{w}x{h}_{cls.slug}_{i:03d}.mp4"
                clip_seed = [seed, r, int(cls), i]
                jobs_args.append((dst, clip_seed, int(cls) + 1, config.as_dict(), w, h,
                                  frames, fps, tool))
                entries.append(ManifestEntry(dst.resolve(), cls, tag,
                                             "predict" if i in to_predict else "train"))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_synth_job, jobs_args))
    else:
        for a in jobs_args:
            _synth_job(a)
    notes = [
        "procedural corpus from mbmdetect.synth",
        f"seed={seed} frames={frames} fps={fps}",
        "encode " + " ".join(f"{k}={v}" for k, v in sorted(config.as_dict().items())),
        f"tool={tool_version(tool)}",
    ]
    manifest = DatasetManifest(entries, notes)
    manifest.save(out_dir / "manifest.csv")
    return manifest


# --------------------------------------------------------------------------
# feature extraction with a content-addressed cache

@dataclass
class FeatureTable:
    rows: list[tuple[ManifestEntry, FeatureVector]]
    failures: list[tuple[ManifestEntry, str]] = field(default_factory=list)
    seconds: float = 0.0

    def vectors(self, split: str | None = None) -> list[FeatureVector]:
        return [v for e, v in self.rows if split is None or e.split == split]

    def entries(self, split: str | None = None) -> list[ManifestEntry]:
        return [e for e, _ in self.rows if split is None or e.split == split]


def cache_key(video_digest: str, n: int, config: EncodeConfig, tool_ver: str) -> str:
    text = f"{video_digest}\nn={n}\n{config.digest_text()}\n{tool_ver}\n"
    return hashlib.sha256(text.encode()).hexdigest()


def _extract_job(args):
    path, n, config, tool, cache_dir = args
    config = EncodeConfig.from_mapping(config)
    key = cache_key(sha256_file(path), n, config, tool_version(tool))
    cached = Path(cache_dir) / f"{key}.json" if cache_dir else None
    if cached and cached.exists():
        return json.loads(cached.read_text())["values"]
    ladder = build_ladder(path, n, config, tool=tool)
    try:
        values = list(compute_feature_vector(ladder, n).values)
    finally:
        ladder.cleanup()
    if cached:
        tmp = cached.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps({"video": str(path), "n": n, "values": values}) + "\n")
        tmp.replace(cached)
    return values


def extract_corpus_features(manifest: DatasetManifest, n: int, config: EncodeConfig | None = None,
                            cache_dir: str | os.PathLike | None = None, jobs: int = 1,
                            tool: str | None = None) -> FeatureTable:
    """One feature vector per manifest entry, rows sorted by path.

    Failed videos are logged and listed in ``failures`` rather than raised.
    """
    config = config or EncodeConfig()
    tool = find_tool(tool)
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.entries, key=lambda e: str(e.path))
    args = [(e.path, n, config.as_dict(), tool, cache_dir) for e in entries]
    start = time.perf_counter()
    table = FeatureTable([])
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(_extract_job, a) for a in args]
            outcomes = [_outcome(f.result) for f in futures]
    else:
        outcomes = [_outcome(lambda a=a: _extract_job(a)) for a in args]
    for e, (values, err) in zip(entries, outcomes):
        if err is None:
            table.rows.append((e, FeatureVector(values, label=e.label)))
        else:
            logger.warning("feature extraction failed for %s: %s", e.path, err)
            table.failures.append((e, err))
    table.seconds = time.perf_counter() - start
    return table


def _outcome(call):
    try:
        return call(), None
    except Exception as exc:  # collected per video, reported by the caller
        return None, f"{type(exc).__name__}: {exc}"


# --------------------------------------------------------------------------
# experiments

BINARY_NAMES = ("original", "recompressed")


def experiment_labels(vectors: Iterable[FeatureVector], binary: bool) -> np.ndarray:
    labels = np.array([int(v.label) for v in vectors])
    return np.minimum(labels, 1) if binary else labels


@dataclass
class GridConfig:
    c_grid: list[float] = field(default_factory=default_c_grid)
    gamma_grid: list[float] = field(default_factory=default_gamma_grid)
    folds: int = 5
    seed: int = 0
    tolerance: float = 1e-3


@dataclass
class EvaluationReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray  # rows true, columns predicted
    config: dict
    predictions: list[tuple[str, str, str]]  # (path, true, predicted)
    search: GridSearchResult | None = None
    failures: list[tuple[str, str]] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def recalls(self) -> dict[str, float]:
        out = {}
        for k, name in enumerate(self.class_names):
            row = self.confusion[k].sum()
            out[name] = float(self.confusion[k, k] / row) if row else float("nan")
        return out


def run_experiment(source: DatasetManifest | FeatureTable, n: int = 2, scaled: bool = False,
                   resolution: str | None = None, grid: GridConfig | None = None, *,
                   binary: bool | None = None, config: EncodeConfig | None = None,
                   cache_dir: str | os.PathLike | None = None, jobs: int = 1,
                   tool: str | None = None,
                   extra_config: dict | None = None) -> tuple[EvaluationReport, SvmModel]:
    """Fit on the train split, evaluate on the predict split.

    ``source`` is a manifest (features are extracted, through the cache when
    ``cache_dir`` is set) or an already extracted table.  Scaler and grid
    search only ever see train-split vectors.  The binary experiment (default
    for n=2) merges the double and triple classes into one recompressed class.
    """
    grid = grid or GridConfig()
    binary = (n == 2) if binary is None else binary
    if isinstance(source, DatasetManifest):
        table = extract_corpus_features(source.filtered(resolution), n, config, cache_dir, jobs, tool)
    else:
        table = source
    rows = [(e, v) for e, v in table.rows if resolution is None or e.resolution == resolution]
    train = [v for e, v in rows if e.split == "train"]
    test = [(e, v) for e, v in rows if e.split == "predict"]
    y_train = experiment_labels(train, binary)
    if len(set(y_train.tolist())) < 2:
        raise InsufficientTrainingData(
            f"train split has classes {sorted(set(y_train.tolist()))}, need at least two")
    timings = {"extract": table.seconds}

    start = time.perf_counter()
    scaler = fit_scaler(train) if scaled else None
    fit_vectors = [apply_scaler(scaler, v) for v in train] if scaler else train
    X = np.array([v.values for v in fit_vectors])
    folds = min(grid.folds, int(np.bincount(y_train).min()))
    search = grid_search(X, y_train, grid.c_grid, grid.gamma_grid, folds=max(folds, 2),
                         seed=grid.seed, tolerance=grid.tolerance)
    model = train_multiclass(X, y_train, search.best_params, scaler)
    timings["train"] = time.perf_counter() - start

    start = time.perf_counter()
    if binary:
        names = BINARY_NAMES
    else:
        names = tuple(VideoClass(c).slug for c in range(3))
    k = len(names)
    confusion = np.zeros((k, k), dtype=int)
    predictions = []
    if test:
        vecs = [apply_scaler(scaler, v) if scaler else v for _, v in test]
        pred = model.predict_many(vecs)
        truth = experiment_labels([v for _, v in test], binary)
        for (e, _), t, p in zip(test, truth, pred):
            confusion[t, p] += 1
            predictions.append((e.path.name, names[t], names[p]))
    timings["predict"] = time.perf_counter() - start

    config = {
        "n": table.rows[0][1].n if table.rows else n,
        "binary": binary,
        "scaled": scaled,
        "resolution": resolution or "all",
        "c": search.best_params.c,
        "gamma": search.best_params.gamma,
        "folds": search.folds,
        "grid_seed": grid.seed,
        "cv_accuracy": search.cv_accuracy,
        "train_size": len(train),
        **(extra_config or {}),
    }
    model.meta.update({"binary": str(binary).lower(), "classes": ",".join(names)})
    report = EvaluationReport(names, confusion, config, predictions, search,
                              [(str(e.path), msg) for e, msg in table.failures], timings)
    return report, model


def experiment_digest(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def render_report(report: EvaluationReport, out_dir: str | os.PathLike | None = None) -> str:
    """Text summary; with ``out_dir`` also writes report.txt, confusion.csv,
    predictions.csv and timings.csv there.

    Timings stay out of report.txt so that identical inputs give identical
    report bytes.
    """
    names = report.class_names
    width = max(12, *(len(n) + 2 for n in names))
    lines = ["experiment"]
    for key in sorted(report.config):
        value = report.config[key]
        lines.append(f"  {key}: {value:.6g}" if isinstance(value, float) else f"  {key}: {value}")
    lines.append("")
    lines.append("confusion (rows true, columns predicted)")
    lines.append(" " * width + "".join(n.rjust(width) for n in names))
    for k, name in enumerate(names):
        lines.append(name.ljust(width) + "".join(str(c).rjust(width) for c in report.confusion[k]))
    lines.append("")
    lines.append(f"accuracy: {100 * report.accuracy:.2f}% ({np.trace(report.confusion)}/{report.total})")
    for name, r in report.recalls.items():
        lines.append(f"recall {name}: " + ("n/a" if np.isnan(r) else f"{100 * r:.2f}%"))
    if report.failures:
        lines.append("")
        lines.append(f"excluded {len(report.failures)} video(s):")
        lines.extend(f"  {p}: {msg}" for p, msg in report.failures)
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true"] + list(names))
        for k, name in enumerate(names):
            w.writerow([name] + report.confusion[k].tolist())
        (out / "confusion.csv").write_text(buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "true", "predicted"])
        w.writerows(report.predictions)
        (out / "predictions.csv").write_text(buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "seconds", "per_video_seconds"])
        videos = max(1, report.config.get("train_size", 0) + report.total)
        for stage, sec in report.timings.items():
            w.writerow([stage, f"{sec:.3f}", f"{sec / videos:.3f}"])
        (out / "timings.csv").write_text(buf.getvalue())
    return text
