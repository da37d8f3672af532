"""Acceptance suite: one test per criterion, each recording PASS/FAIL.

Criteria 5-9 share one synthesized corpus (20 clips per class, 320x240,
60 frames).  Criterion 9 rebuilds everything from scratch in a second
directory, without the feature cache, and compares the artifacts byte for
byte.
"""
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from conftest import FIXTURES, HAVE_TOOL, record_criterion
from oracles import brute_force_dual, brute_force_vi, oracle_bias
from mbmdetect.errors import GrammarError
from mbmdetect.extract import (
    Direction,
    FrameGrid,
    FrameType,
    Kind,
    MacroblockMode,
    MacroblockType,
    MotionVector,
    Partition,
    load_generation,
    parse_debug_stream,
    serialize_grids,
)
from mbmdetect.feature import compute_vi, format_features_csv, indicator
from mbmdetect.harness import (
    DatasetManifest,
    GridConfig,
    extract_corpus_features,
    render_report,
    run_experiment,
    synthesize_corpus,
)
from mbmdetect.svm import (
    SvmParams,
    dual_objective,
    predict,
    rbf_matrix,
    smo_solve,
    train_binary,
)

SEED = 2024
PER_CLASS = 20
DECAY_CLIPS = 10
RESOLUTION = (320, 240)

needs_tool = pytest.mark.skipif(not HAVE_TOOL, reason="no ffmpeg/PyAV available")


# -- random grids ---------------------------------------------------------------

KINDS = list(Kind)
PARTS = list(Partition)


def random_mode(rng):
    kind = KINDS[rng.integers(len(KINDS))]
    if kind in (Kind.INTRA4X4, Kind.INTRA16X16):
        t = MacroblockType(kind)
    elif kind is Kind.OTHER:
        t = MacroblockType(kind, raw="?" if rng.random() < 0.5 else "%")
    else:
        t = MacroblockType(kind, PARTS[rng.integers(len(PARTS))])
    mvs = []
    if not t.is_intra:
        for _ in range(rng.integers(0, 3)):
            mvs.append(MotionVector(int(rng.integers(-2, 3)), int(rng.integers(-1, 2)),
                                    Direction(int(rng.integers(2))), int(rng.choice([0, 8])),
                                    int(rng.choice([0, 8])), 8, 8))
    return MacroblockMode(t, tuple(mvs))


def random_generation_pair(rng):
    frames = int(rng.integers(1, 6))
    rows, cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    types = [FrameType.P] + [FrameType(rng.choice(["P", "B"])) for _ in range(frames - 1)]

    def gen(base=None):
        out = []
        for k, ft in enumerate(types):
            cells = []
            for y in range(rows):
                row = []
                for x in range(cols):
                    # keep some cells equal so both outcomes are exercised
                    if base is not None and rng.random() < 0.5:
                        row.append(base[k].cells[y][x])
                    else:
                        row.append(random_mode(rng))
                cells.append(tuple(row))
            out.append(FrameGrid(k, ft, rows, cols, tuple(cells)))
        return out
    a = gen()
    return a, gen(a)


def test_criterion_1_vi_oracle_equivalence():
    rng = np.random.default_rng(SEED)
    pairs = [random_generation_pair(rng) for _ in range(1000)]
    start = time.perf_counter()
    mismatches = sum(compute_vi(a, b) != brute_force_vi(a, b) for a, b in pairs)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5.0
    record_criterion(1, "unstable-MB average equals brute-force recount on 1000 grid pairs", ok,
                     f"{mismatches} mismatches, {elapsed:.2f}s")
    assert ok


def test_criterion_2_mode_laws():
    rng = np.random.default_rng(SEED + 1)
    failures = 0
    for _ in range(10_000):
        a, b = random_mode(rng), random_mode(rng)
        failures += indicator(a, a) != 0
        failures += indicator(a, b) != indicator(b, a)
        if a.mb_type != b.mb_type:
            failures += indicator(a, b) != 1
        # skip and intra blocks never compare their vectors
        for t in (MacroblockType(Kind.SKIP), MacroblockType(Kind.INTRA4X4),
                  MacroblockType(Kind.INTRA16X16)):
            failures += indicator(MacroblockMode(t, a.mvs), MacroblockMode(t, b.mvs)) != 0
        # vector-carrying types do
        fwd = MacroblockType(Kind.FORWARD, Partition.FOUR_8X8)
        differ = MacroblockMode(fwd, a.mvs) != MacroblockMode(fwd, b.mvs)
        failures += indicator(MacroblockMode(fwd, a.mvs), MacroblockMode(fwd, b.mvs)) != int(differ)
    ok = failures == 0
    record_criterion(2, "indicator laws on 10000 random mode pairs", ok, f"{failures} violations")
    assert ok


def test_criterion_3_parser_golden_files():
    problems = []
    for name, w, h in (("two_frame_320x240", 320, 240), ("ibbp_64x48", 64, 48)):
        grids = load_generation(FIXTURES / f"{name}.mbdebug.txt", FIXTURES / f"{name}.mv.csv", w, h)
        if serialize_grids(grids) != (FIXTURES / f"{name}.grid.txt").read_text():
            problems.append(f"{name} differs from its canonical grid")
    try:
        parse_debug_stream((FIXTURES / "two_frame_320x240.corrupt.mbdebug.txt").read_text())
        problems.append("mutated fixture parsed without error")
    except GrammarError as exc:
        if exc.line_no != 22:
            problems.append(f"GrammarError at line {exc.line_no}, expected 22")
    ok = not problems
    record_criterion(3, "golden fixtures parse bit-exactly; mutated fixture fails at line 22", ok,
                     "; ".join(problems) or "2 fixtures + 1 mutation")
    assert ok, problems


def test_criterion_4_smo_against_brute_force():
    rng = np.random.default_rng(SEED + 2)
    start = time.perf_counter()
    worst, mismatched = 0.0, 0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        X = rng.normal(size=(n, int(rng.integers(1, 4))))
        y = rng.choice([-1, 1], size=n)
        y[0], y[1] = -1, 1
        C = float(2.0 ** rng.integers(-2, 5))
        gamma = float(2.0 ** rng.integers(-3, 2))
        best, alpha_star, K = brute_force_dual(X, y, C, gamma)
        res = smo_solve(rbf_matrix(X, X, gamma), y, SvmParams(C, gamma, tolerance=1e-9))
        worst = max(worst, abs(dual_objective(res.alpha, K, y.astype(float)) - best))
        b = oracle_bias(alpha_star, K, y.astype(float), C)
        Q = np.vstack([X, rng.normal(size=(10, X.shape[1]))])
        Kq = rbf_matrix(Q, X, gamma)
        ours = np.where(Kq @ (res.alpha * y) + res.bias > 0, 1, -1)
        theirs = np.where(Kq @ (alpha_star * y) + b > 0, 1, -1)
        mismatched += not np.array_equal(ours, theirs)
    xor_X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    xor_y = np.array([-1, -1, 1, 1])
    model = train_binary(xor_X, xor_y, SvmParams(c=10.0, gamma=1.0))
    xor_acc = np.mean([predict(model, x) == t for x, t in zip(xor_X, xor_y)])
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and mismatched == 0 and xor_acc == 1.0 and elapsed < 30
    record_criterion(4, "SMO matches brute-force dual on 200 problems; XOR solved", ok,
                     f"max objective gap {worst:.2e}, {mismatched} prediction mismatches, "
                     f"XOR {100 * xor_acc:.0f}%, {elapsed:.1f}s")
    assert ok


# -- corpus criteria ----------------------------------------------------------------

@dataclass
class Reproduction:
    root: Path
    decay_means: np.ndarray = None
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


def _jobs():
    return max(1, len(os.sched_getaffinity(0)))


def reproduce(root: Path, use_cache: bool) -> Reproduction:
    """Synthesize the corpus and run the decay, binary and three-class experiments."""
    out = Reproduction(root)
    cache = root / "cache" if use_cache else None
    grid = GridConfig(seed=SEED)

    start = time.perf_counter()
    manifest = synthesize_corpus(root / "corpus", {"original": PER_CLASS, "double": PER_CLASS,
                                                   "triple": PER_CLASS},
                                 [RESOLUTION], seed=SEED, jobs=_jobs())
    out.timings["synthesize"] = time.perf_counter() - start

    start = time.perf_counter()
    originals = sorted((e for e in manifest.entries if e.label == 0), key=lambda e: str(e.path))
    decay = extract_corpus_features(DatasetManifest(originals[:DECAY_CLIPS]), 4,
                                    cache_dir=cache, jobs=_jobs())
    values = np.array([v.values for v in decay.vectors()])
    out.decay_means = values.mean(axis=0)
    out.artifacts["features_n4.csv"] = format_features_csv(decay.vectors())
    out.artifacts["decay.csv"] = "generation_pair,mean_unstable\n" + "".join(
        f"{k},{m:.6f}\n" for k, m in enumerate(out.decay_means))
    out.timings["decay"] = time.perf_counter() - start

    start = time.perf_counter()
    binary = DatasetManifest([e for e in manifest.entries if e.label in (0, 1)], manifest.notes)
    table2 = extract_corpus_features(binary, 2, cache_dir=cache, jobs=_jobs())
    out.artifacts["features_n2.csv"] = format_features_csv(table2.vectors())
    for scaled in (False, True):
        report, _ = run_experiment(table2, 2, scaled=scaled, grid=grid)
        key = f"binary_{'scaled' if scaled else 'unscaled'}"
        out.reports[key] = report
        render_report(report, root / "reports" / key)
    # resubstitution smoke run: predict on the train split itself
    train = [(e, v) for e, v in table2.rows if e.split == "train"]
    resub_rows = train + [(type(e)(Path(f"{e.path}.resub"), e.label, e.resolution, "predict"), v)
                          for e, v in train]
    out.reports["binary_resubstitution"], _ = run_experiment(
        type(table2)(resub_rows), 2, scaled=False, grid=grid)
    out.timings["binary"] = time.perf_counter() - start

    start = time.perf_counter()
    table3 = extract_corpus_features(manifest, 3, cache_dir=cache, jobs=_jobs())
    out.artifacts["features_n3.csv"] = format_features_csv(table3.vectors())
    report, _ = run_experiment(table3, 3, scaled=False, grid=grid)
    out.reports["triple_unscaled"] = report
    render_report(report, root / "reports" / "triple_unscaled")
    out.timings["triple"] = time.perf_counter() - start

    for name, text in out.artifacts.items():
        (root / name).write_text(text)
    return out


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    if not HAVE_TOOL:
        pytest.skip("no ffmpeg/PyAV available")
    return reproduce(tmp_path_factory.mktemp("acceptance-a"), use_cache=True)


@needs_tool
def test_criterion_5_decay(first_run):
    m = first_run.decay_means
    elapsed = first_run.timings["synthesize"] + first_run.timings["decay"]
    ok = m[1] < m[0] and m[2] <= m[1] and elapsed < 600
    record_criterion(5, f"mean unstable MBs decay over {DECAY_CLIPS} clips x 4 re-encodes", ok,
                     "means " + " > ".join(f"{x:.1f}" for x in m) + f", {elapsed:.0f}s")
    assert ok


@needs_tool
def test_criterion_6_binary_detection(first_run):
    r = first_run.reports["binary_unscaled"]
    elapsed = first_run.timings["synthesize"] + first_run.timings["binary"]
    ok = r.accuracy >= 0.85 and r.total + r.config["train_size"] >= 40 and elapsed < 1200
    record_criterion(6, "binary original/double held-out accuracy >= 85%", ok,
                     f"{100 * r.accuracy:.1f}% on {r.total} held-out of "
                     f"{r.total + r.config['train_size']} clips, {elapsed:.0f}s")
    assert ok


def binomial_tail(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p)."""
    return sum(math.comb(n, i) * p ** i * (1 - p) ** (n - i) for i in range(k, n + 1))


@needs_tool
def test_criterion_7_three_class_detection(first_run):
    r = first_run.reports["triple_unscaled"]
    correct = int(np.trace(r.confusion))
    p_value = binomial_tail(correct, r.total, 1 / 3)
    elapsed = first_run.timings["synthesize"] + first_run.timings["triple"]
    ok = (r.accuracy >= 0.60 and p_value < 0.01 and r.total + r.config["train_size"] >= 45
          and elapsed < 1800)
    record_criterion(7, "three-class held-out accuracy >= 60%, binomial p < 0.01", ok,
                     f"{100 * r.accuracy:.1f}% ({correct}/{r.total}), p={p_value:.2e}, {elapsed:.0f}s")
    assert ok


@needs_tool
def test_criterion_8_scaled_unscaled_parity(first_run):
    a = first_run.reports["binary_unscaled"].accuracy
    b = first_run.reports["binary_scaled"].accuracy
    ok = abs(a - b) <= 0.10
    record_criterion(8, "scaled vs unscaled binary accuracy within 10 points", ok,
                     f"unscaled {100 * a:.1f}%, scaled {100 * b:.1f}%")
    assert ok


@needs_tool
def test_resubstitution_not_worse(first_run):
    held = first_run.reports["binary_unscaled"].accuracy
    resub = first_run.reports["binary_resubstitution"].accuracy
    assert resub >= held, (resub, held)


@needs_tool
@pytest.mark.slow
def test_criterion_9_determinism(first_run, tmp_path_factory):
    second = reproduce(tmp_path_factory.mktemp("acceptance-b"), use_cache=False)
    differences = [name for name in first_run.artifacts
                   if first_run.artifacts[name] != second.artifacts[name]]
    for key in ("binary_unscaled", "binary_scaled", "triple_unscaled"):
        for name in ("report.txt", "confusion.csv", "predictions.csv"):
            a = (first_run.root / "reports" / key / name).read_bytes()
            b = (second.root / "reports" / key / name).read_bytes()
            if a != b:
                differences.append(f"{key}/{name}")
    corpus_a = sorted((first_run.root / "corpus").glob("*.mp4"))
    corpus_b = sorted((second.root / "corpus").glob("*.mp4"))
    same_clips = [a.read_bytes() == b.read_bytes() for a, b in zip(corpus_a, corpus_b)]
    if not all(same_clips) or len(corpus_a) != len(corpus_b):
        differences.append("corpus clips")
    ok = not differences
    record_criterion(9, "rerun with same seed reproduces clips, feature CSVs and reports", ok,
                     "; ".join(differences) or f"{len(corpus_a)} clips, 4 feature CSVs, 9 report files identical")
    assert ok, differences
