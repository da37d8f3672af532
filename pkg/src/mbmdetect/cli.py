"""Command-line entry point.

Data (CSV, JSON, verdicts, paths) goes to stdout; diagnostics go to stderr.
Exit codes: 0 success, 1 analysis error, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .codec import (
    TOOL_ENV,
    EncodeConfig,
    RecompressionLadder,
    build_ladder,
    find_tool,
    read_config_file,
    tool_version,
)
from .errors import MbmError, ModelFormatError, NotAVideo, ToolNotFound, UnsupportedCodec
from .feature import (
    FeatureVector,
    VideoClass,
    apply_scaler,
    compute_feature_vector,
    fit_scaler,
    format_features_csv,
    read_features,
)
from .harness import (
    BINARY_NAMES,
    DatasetManifest,
    GridConfig,
    experiment_digest,
    experiment_labels,
    render_report,
    run_experiment,
    sha256_file,
    synthesize_corpus,
)
from .svm import grid_search, load_model, save_model, train_multiclass

logger = logging.getLogger("mbmdetect")

# setting -> (default, environment variable, type)
SETTINGS = {
    "codec_tool": (None, TOOL_ENV, str),
    "quality_scale": (23, "MBMDETECT_QUALITY", int),
    "gop_length": (12, "MBMDETECT_GOP", int),
    "b_frames": (2, "MBMDETECT_BFRAMES", int),
    "preset": ("medium", "MBMDETECT_PRESET", str),
    "rate_control": ("qp", "MBMDETECT_RATE_CONTROL", str),
    "jobs": (1, "MBMDETECT_JOBS", int),
    "seed": (0, "MBMDETECT_SEED", int),
    "cache_dir": (None, "MBMDETECT_CACHE", str),
}
CONFIG_ENV = "MBMDETECT_CONFIG"
INPUT_ERRORS = (OSError, ToolNotFound, NotAVideo, UnsupportedCodec, ModelFormatError)


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def encode(self) -> EncodeConfig:
        return EncodeConfig.from_mapping(self.values)

    def describe(self) -> str:
        return "".join(f"{k} = {self.values[k]}  # {self.sources[k]}\n" for k in SETTINGS)


def resolve_config(args, environ=None) -> CliConfig:
    """defaults <- config file <- environment <- flags, remembering where each value came from."""
    environ = os.environ if environ is None else environ
    cfg = CliConfig()
    for key, (default, _, _) in SETTINGS.items():
        cfg.values[key], cfg.sources[key] = default, "default"
    path = args.config or environ.get(CONFIG_ENV)
    if path:
        for key, raw in read_config_file(path).items():
            if key not in SETTINGS:
                raise UsageError(f"unknown setting {key!r} in {path}")
            cfg.values[key], cfg.sources[key] = SETTINGS[key][2](raw), f"file {path}"
    for key, (_, env, typ) in SETTINGS.items():
        if environ.get(env):
            cfg.values[key], cfg.sources[key] = typ(environ[env]), f"env {env}"
    for key in SETTINGS:
        value = getattr(args, key, None)
        if value is not None:
            cfg.values[key], cfg.sources[key] = value, "flag"
    return cfg


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their defaults are suppressed so a
    # flag given before the subcommand is not reset
    d = argparse.SUPPRESS if suppress else None
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    g = common.add_argument_group("global options")
    g.add_argument("--codec-tool", dest="codec_tool", default=d, help="path to the ffmpeg-compatible tool")
    g.add_argument("--quality", dest="quality_scale", type=int, default=d,
                   help="quality scale (QP) for re-encodes")
    g.add_argument("--gop", dest="gop_length", type=int, default=d, help="GOP length for re-encodes")
    g.add_argument("--jobs", type=int, default=d, help="worker processes")
    g.add_argument("--seed", type=int, default=d, help="seed for synthesis and cross-validation")
    g.add_argument("--cache", dest="cache_dir", default=d, help="feature cache directory")
    g.add_argument("--keep", action="store_true", default=d, help="keep intermediate ladders")
    g.add_argument("--json", action="store_true", default=d, help="JSON output")
    g.add_argument("--show-config", action="store_true", default=d,
                   help="print the effective settings and exit")
    g.add_argument("--config", default=d, help=f"settings file (or ${CONFIG_ENV})")
    g.add_argument("-v", "--verbose", action="count", default=d)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    p = argparse.ArgumentParser(prog="mbmdetect", parents=[_global_options(suppress=False)], allow_abbrev=False,
                                description="Detect recompressed H.264 video.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("ladder", parents=[common], help="build a recompression ladder")
    s.add_argument("input")
    s.add_argument("-n", type=int, default=2, help="number of re-encodes")
    s.add_argument("-o", "--out", help="ladder directory (default: a new temp dir)")

    s = sub.add_parser("extract", parents=[common], help="feature vector(s) as CSV")
    s.add_argument("inputs", nargs="+", help="videos or ladder directories")
    s.add_argument("-n", type=int, default=2)
    s.add_argument("--label", help="class to record for every input")

    s = sub.add_parser("train", parents=[common], help="train a model from a feature CSV")
    s.add_argument("features")
    s.add_argument("-o", "--out", required=True, help="model file")
    s.add_argument("--scaled", action="store_true")
    s.add_argument("--mode", choices=("auto", "binary", "multiclass"), default="auto",
                   help="auto means binary for 2 features")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--c-grid", dest="c_values", type=float, nargs="+", help="C grid (default 2^-5..2^15)")
    s.add_argument("--gamma-grid", dest="gamma_values", type=float, nargs="+",
                   help="gamma grid (default 2^-15..2^3)")

    s = sub.add_parser("predict", parents=[common], help="classify a video")
    s.add_argument("model")
    s.add_argument("input")

    s = sub.add_parser("evaluate", parents=[common], help="run an experiment over a manifest")
    s.add_argument("manifest")
    s.add_argument("-n", type=int, default=2)
    s.add_argument("--scaled", action="store_true")
    s.add_argument("--mode", choices=("auto", "binary", "multiclass"), default="auto")
    s.add_argument("--resolution", help="only use entries with this resolution tag")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("-o", "--out", default="experiments", help="parent of the experiment directory")

    s = sub.add_parser("synthesize", parents=[common], help="generate a labelled procedural corpus")
    s.add_argument("out")
    s.add_argument("--original", type=int, default=10)
    s.add_argument("--double", type=int, default=10)
    s.add_argument("--triple", type=int, default=0)
    s.add_argument("--resolution", action="append", dest="resolutions", metavar="WxH",
                   help="repeatable; default 320x240")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--fps", type=int, default=30)
    s.add_argument("--predict-fraction", type=float, default=0.5)
    return p


def _binary(mode: str, n: int) -> bool:
    return n == 2 if mode == "auto" else mode == "binary"


def _vector_for(path: Path, n: int, cfg: CliConfig, tool: str) -> FeatureVector:
    if path.is_dir():
        ladder = RecompressionLadder.load(path)
        if ladder.n < n:
            raise UsageError(f"{path} has {ladder.n} re-encodes, need {n}")
        return compute_feature_vector(ladder, n)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    ladder = build_ladder(path, n, cfg.encode(), tool=tool)
    try:
        return compute_feature_vector(ladder, n)
    finally:
        if cfg.values.get("keep"):
            print(f"kept ladder {ladder.directory}", file=sys.stderr)
        else:
            ladder.cleanup()


def cmd_ladder(args, cfg, tool):
    ladder = build_ladder(args.input, args.n, cfg.encode(), workdir=args.out, tool=tool)
    if args.json:
        print(json.dumps({"directory": str(ladder.directory), "n": ladder.n,
                          "tool_version": ladder.tool_version}))
    else:
        print(ladder.directory)


def cmd_extract(args, cfg, tool):
    label = VideoClass.parse(args.label) if args.label else None
    vectors = [_vector_for(Path(p), args.n, cfg, tool).with_label(label) for p in args.inputs]
    if args.json:
        for p, v in zip(args.inputs, vectors):
            print(json.dumps({"input": p, "features": list(v.values)}))
    else:
        sys.stdout.write(format_features_csv(vectors))


def cmd_train(args, cfg, tool):
    vectors = read_features(args.features)
    if any(v.label is None for v in vectors):
        raise UsageError(f"{args.features}: every row needs a label to train")
    if not vectors:
        raise UsageError(f"{args.features} holds no feature rows")
    binary = _binary(args.mode, vectors[0].n)
    scaler = fit_scaler(vectors) if args.scaled else None
    X = np.array([(apply_scaler(scaler, v) if scaler else v).values for v in vectors])
    y = experiment_labels(vectors, binary)
    folds = max(2, min(args.folds, int(np.bincount(y)[np.unique(y)].min())))
    search = grid_search(X, y, args.c_values, args.gamma_values, folds=folds, seed=cfg["seed"])
    model = train_multiclass(X, y, search.best_params, scaler)
    names = BINARY_NAMES if binary else tuple(VideoClass(c).slug for c in range(3))
    model.meta.update({"binary": str(binary).lower(), "classes": ",".join(names)})
    save_model(model, args.out)
    summary = {"model": args.out, "c": search.best_params.c, "gamma": search.best_params.gamma,
               "cv_accuracy": search.cv_accuracy, "samples": len(vectors), "binary": binary,
               "scaled": bool(scaler), "converged": model.converged}
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"{args.out}: C={search.best_params.c:g} gamma={search.best_params.gamma:g} "
              f"cv_accuracy={100 * search.cv_accuracy:.2f}%")


def cmd_predict(args, cfg, tool):
    model_path = Path(args.model)
    if not model_path.exists():
        raise FileNotFoundError(f"model file {model_path} does not exist")
    model = load_model(model_path)
    n = model.n_features
    vector = _vector_for(Path(args.input), n, cfg, tool)
    query = apply_scaler(model.scaler, vector) if model.scaler else vector
    label = int(model.predict_many([query])[0])
    names = model.meta.get("classes", "").split(",")
    name = names[label] if 0 <= label < len(names) and names[0] else VideoClass(label).slug
    if args.json:
        out = {"class": name, "label": label, "input": args.input, "features": list(vector.values)}
        if model.scaler:
            out["scaled_features"] = list(query.values)
        print(json.dumps(out))
    else:
        feats = " ".join(f"v{i}={x:.3f}" for i, x in enumerate(vector.values))
        print(f"{args.input}: {name} ({feats})")


def cmd_evaluate(args, cfg, tool):
    manifest = DatasetManifest.load(args.manifest)
    binary = _binary(args.mode, args.n)
    grid = GridConfig(folds=args.folds, seed=cfg["seed"])
    digest_input = {
        "manifest": sha256_file(args.manifest), "n": args.n, "binary": binary,
        "scaled": args.scaled, "resolution": args.resolution, "folds": args.folds,
        "seed": cfg["seed"], "encode": cfg.encode().as_dict(), "tool": tool_version(tool),
    }
    out_dir = Path(args.out) / f"exp-{experiment_digest(digest_input)}"
    report, model = run_experiment(manifest, args.n, args.scaled, args.resolution, grid,
                                   binary=binary, config=cfg.encode(), cache_dir=cfg["cache_dir"],
                                   jobs=cfg["jobs"], tool=tool)
    text = render_report(report, out_dir)
    save_model(model, out_dir / "model.svm")
    if args.json:
        print(json.dumps({"directory": str(out_dir), "accuracy": report.accuracy,
                          "confusion": report.confusion.tolist(),
                          "classes": list(report.class_names)}))
    else:
        sys.stdout.write(text)
        print(f"report written to {out_dir}", file=sys.stderr)


def cmd_synthesize(args, cfg, tool):
    resolutions = []
    for r in args.resolutions or ["320x240"]:
        try:
            w, h = (int(x) for x in r.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad resolution {r!r}, expected WxH") from None
        resolutions.append((w, h))
    counts = {VideoClass.ORIGINAL: args.original, VideoClass.DOUBLE: args.double,
              VideoClass.TRIPLE: args.triple}
    counts = {k: v for k, v in counts.items() if v > 0}
    if not counts:
        raise UsageError("nothing to synthesize")
    synthesize_corpus(args.out, counts, resolutions, cfg["seed"], cfg.encode(), args.frames,
                      args.fps, args.predict_fraction, cfg["jobs"], tool)
    print(Path(args.out) / "manifest.csv")


COMMANDS = {"ladder": cmd_ladder, "extract": cmd_extract, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "synthesize": cmd_synthesize}


def _error(kind: str, exc: BaseException, code: int) -> int:
    message = str(exc).splitlines()[0] if str(exc) else ""
    print(f"mbmdetect: error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * (args.verbose or 0)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.values["keep"] = bool(args.keep)
        if args.show_config:
            sys.stdout.write(cfg.describe())
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 2
        tool = find_tool(cfg["codec_tool"])
        COMMANDS[args.command](args, cfg, tool)
    except UsageError as exc:
        return _error("UsageError", exc, 2)
    except INPUT_ERRORS as exc:
        return _error(type(exc).__name__, exc, 2)
    except (MbmError, ValueError) as exc:
        return _error(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
