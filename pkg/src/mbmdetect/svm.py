"""RBF-kernel support vector machine trained with SMO.

The binary solver works on the soft-margin dual

    min_a  1/2 a'Qa - e'a   s.t.  0 <= a_i <= C,  y'a = 0,   Q_ij = y_i y_j K(x_i, x_j)

choosing at each step the maximal violating pair (first-order working set
selection; ties go to the lowest index) and solving the two-variable
subproblem analytically.  Multiclass problems are split one-vs-one.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientSamples,
    LengthMismatch,
    ModelFormatError,
    ScalingMismatch,
    SingleClassInput,
)
from .feature import FeatureScaler, FeatureVector

FORMAT_VERSION = 1
_TAU = 1e-12


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SvmParams:
    c: float = 1.0
    gamma: float = 1.0
    tolerance: float = 1e-3
    max_passes: int = 1000  # iteration cap = max_passes * n_samples
    alpha_tol: float = 1e-7

    def __post_init__(self):
        if not (self.c > 0 and self.gamma > 0 and self.tolerance > 0):
            raise ValueError("c, gamma and tolerance must all be > 0")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


def rbf_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"vectors of length {x.size} and {y.size}")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    d = x - y
    return math.exp(-gamma * float(d @ d))


def squared_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def rbf_matrix(X: np.ndarray, Y: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * squared_distances(X, Y))


# --------------------------------------------------------------------------
# binary SMO

@dataclass
class SmoResult:
    alpha: np.ndarray
    bias: float
    iterations: int
    converged: bool


def dual_objective(alpha: np.ndarray, K: np.ndarray, y: np.ndarray) -> float:
    """Dual objective to be *maximised*: sum(a) - 1/2 (a*y)' K (a*y)."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def smo_solve(K: np.ndarray, y: np.ndarray, params: SvmParams) -> SmoResult:
    """Solve the binary dual for a precomputed kernel matrix and labels in {-1, +1}."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    C = float(params.c)
    Q = K * np.outer(y, y)
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of 1/2 a'Qa - e'a
    pos = y > 0
    neg = ~pos
    max_iter = params.max_passes * max(n, 1)
    converged = False
    it = 0
    for it in range(max_iter):
        score = -y * G
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        if score[i] - score[j] < params.tolerance:
            converged = True
            break
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Q[i, j]
            delta = (-G[i] - G[j]) / (quad if quad > 0 else _TAU)
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Q[i, j]
            delta = (G[i] - G[j]) / (quad if quad > 0 else _TAU)
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        G += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
    else:
        it = max_iter
    return SmoResult(alpha, _bias(alpha, G, y, C), it, converged)


def _bias(alpha, G, y, C) -> float:
    yG = y * G
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
        ub = float(yG[ub_mask].min()) if ub_mask.any() else math.inf
        lb = float(yG[lb_mask].max()) if lb_mask.any() else -math.inf
        if math.isinf(ub) or math.isinf(lb):
            rho = lb if math.isinf(ub) else ub
        else:
            rho = (ub + lb) / 2.0
    return -rho


@dataclass(frozen=True)
class BinarySvm:
    """One trained two-class machine; decision > 0 votes for ``classes[1]``."""

    support_vectors: np.ndarray
    dual_coefs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    classes: tuple[int, int]
    converged: bool = True

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(self.dual_coefs) == 0:
            return np.full(len(X), self.bias)
        return rbf_matrix(X, self.support_vectors, self.gamma) @ self.dual_coefs + self.bias


def _fit_binary(X: np.ndarray, y: np.ndarray, params: SvmParams, classes,
                K: np.ndarray | None = None) -> BinarySvm:
    if K is None:
        K = rbf_matrix(X, X, params.gamma)
    res = smo_solve(K, y, params)
    if not res.converged:
        warnings.warn(f"SMO hit its iteration cap (C={params.c:g}, gamma={params.gamma:g})",
                      NonConvergenceWarning, stacklevel=3)
    sv = res.alpha > 0
    return BinarySvm(X[sv].copy(), (res.alpha * y)[sv], res.bias, params.gamma,
                     tuple(classes), res.converged)


# --------------------------------------------------------------------------
# models

@dataclass
class SvmModel:
    params: SvmParams
    classes: tuple[int, ...]
    machines: dict[tuple[int, int], BinarySvm]
    scaler: FeatureScaler | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(m.converged for m in self.machines.values())

    @property
    def n_features(self) -> int:
        for m in self.machines.values():
            if len(m.support_vectors):
                return m.support_vectors.shape[1]
        return int(self.meta.get("n_features", 0))

    # binary conveniences
    @property
    def _only(self) -> BinarySvm:
        if len(self.machines) != 1:
            raise AttributeError("multiclass model has one machine per class pair")
        return next(iter(self.machines.values()))

    @property
    def support_vectors(self) -> np.ndarray:
        return self._only.support_vectors

    @property
    def dual_coefs(self) -> np.ndarray:
        return self._only.dual_coefs

    @property
    def bias(self) -> float:
        return self._only.bias

    def decision_function(self, X) -> np.ndarray:
        """Binary models only: signed distance, positive for ``classes[1]``."""
        return self._only.decision(self._as_matrix(X))

    def _as_matrix(self, X) -> np.ndarray:
        if isinstance(X, FeatureVector):
            X = [X]
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], FeatureVector):
            want = self.scaler is not None
            if any(v.scaled != want for v in X):
                raise ScalingMismatch(
                    "model trained on scaled features" if want else "model trained on unscaled features")
            X = [v.values for v in X]
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        nf = self.n_features
        if nf and X.shape[1] != nf:
            raise DimensionMismatch(f"input has {X.shape[1]} features, model expects {nf}")
        return X

    def predict_many(self, X) -> np.ndarray:
        X = self._as_matrix(X)
        if len(self.classes) == 2:
            (lo, hi), m = next(iter(self.machines.items()))
            return np.where(m.decision(X) > 0, hi, lo)
        votes = np.zeros((len(X), len(self.classes)), dtype=int)
        margin = np.zeros((len(X), len(self.classes)))
        col = {c: k for k, c in enumerate(self.classes)}
        for (lo, hi), m in self.machines.items():
            d = m.decision(X)
            win_hi = d > 0
            votes[win_hi, col[hi]] += 1
            votes[~win_hi, col[lo]] += 1
            margin[:, col[hi]] += d
            margin[:, col[lo]] -= d
        out = []
        for v, g in zip(votes, margin):
            # most votes, then largest summed margin, then the smaller label
            best = min(range(len(self.classes)), key=lambda k: (-v[k], -g[k], self.classes[k]))
            out.append(self.classes[best])
        return np.array(out)


def _check_samples(samples, labels):
    try:
        X = np.asarray(samples, dtype=np.float64)
    except ValueError:
        raise DimensionMismatch("samples must all have the same dimension") from None
    if X.ndim != 2:
        raise DimensionMismatch("samples must all have the same dimension")
    labels = np.asarray(labels)
    if len(labels) != len(X):
        raise DimensionMismatch(f"{len(X)} samples but {len(labels)} labels")
    return X, labels


def train_binary(samples, labels, params: SvmParams, scaler: FeatureScaler | None = None) -> SvmModel:
    """Train a two-class machine on labels in {-1, +1}."""
    X, labels = _check_samples(samples, labels)
    present = set(labels.tolist())
    if not present <= {-1, 1}:
        raise ValueError(f"binary labels must be -1/+1, got {sorted(present)}")
    if len(present) < 2:
        raise SingleClassInput("both labels -1 and +1 must be present")
    y = labels.astype(np.float64)
    machine = _fit_binary(X, y, params, (-1, 1))
    return SvmModel(params, (-1, 1), {(-1, 1): machine}, scaler)


def train_multiclass(samples, labels, params: SvmParams, scaler: FeatureScaler | None = None,
                     K: np.ndarray | None = None) -> SvmModel:
    """One-vs-one training; the pair (a, b) with a < b maps b to +1."""
    X, labels = _check_samples(samples, labels)
    classes = tuple(sorted(set(labels.tolist())))
    if len(classes) < 2:
        raise SingleClassInput(f"only class {classes} present")
    if K is None:
        K = rbf_matrix(X, X, params.gamma)
    machines = {}
    for lo, hi in itertools.combinations(classes, 2):
        idx = np.flatnonzero((labels == lo) | (labels == hi))
        y = np.where(labels[idx] == hi, 1.0, -1.0)
        machines[(lo, hi)] = _fit_binary(X[idx], y, params, (lo, hi), K[np.ix_(idx, idx)])
    return SvmModel(params, classes, machines, scaler)


def predict(model: SvmModel, x):
    """Class label for one sample (array-like or FeatureVector)."""
    return model.predict_many(x)[0].item()


# --------------------------------------------------------------------------
# grid search

def default_c_grid() -> list[float]:
    return [2.0 ** k for k in range(-5, 16, 2)]


def default_gamma_grid() -> list[float]:
    return [2.0 ** k for k in range(-15, 4, 2)]


@dataclass
class GridSearchResult:
    best_params: SvmParams
    cv_accuracy: float
    fold_scores: list[float]
    search_log: list[tuple[float, float, float]]
    seed: int
    folds: int
    nonconverged: list[tuple[float, float]] = field(default_factory=list)


def stratified_folds(labels, folds: int, seed: int) -> list[np.ndarray]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=int)
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < folds:
            raise InsufficientSamples(f"class {cls} has {len(idx)} samples, need >= {folds} folds")
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % folds
    return [np.flatnonzero(assignment == f) for f in range(folds)]


def grid_search(samples, labels, c_grid: Sequence[float] | None = None,
                gamma_grid: Sequence[float] | None = None, folds: int = 5, seed: int = 0,
                tolerance: float = 1e-3, max_passes: int = 1000) -> GridSearchResult:
    """Exhaustive stratified k-fold search over ``c_grid`` x ``gamma_grid``.

    Ties on cross-validated accuracy go to the smallest C, then the smallest
    gamma.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    X, labels = _check_samples(samples, labels)
    c_grid = sorted(c_grid or default_c_grid())
    gamma_grid = sorted(gamma_grid or default_gamma_grid())
    parts = stratified_folds(labels, folds, seed)
    D = squared_distances(X, X)
    log, best, nonconv = [], None, []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        for c in c_grid:
            for gamma in gamma_grid:
                params = SvmParams(c, gamma, tolerance, max_passes)
                K = np.exp(-gamma * D)
                scores, ok = [], True
                for f, test in enumerate(parts):
                    train = np.concatenate([p for g, p in enumerate(parts) if g != f])
                    model = train_multiclass(X[train], labels[train], params,
                                             K=K[np.ix_(train, train)])
                    ok &= model.converged
                    pred = model.predict_many(X[test])
                    scores.append(float(np.mean(pred == labels[test])))
                score = float(np.mean(scores))
                log.append((c, gamma, score))
                if not ok:
                    nonconv.append((c, gamma))
                if best is None or score > best[0]:
                    best = (score, params, scores)
    score, params, scores = best
    return GridSearchResult(params, score, scores, log, seed, folds, nonconv)


# --------------------------------------------------------------------------
# persistence

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_model(model: SvmModel, path) -> Path:
    """Write the line-oriented model format.

        mbmdetect-svm 1
        kernel rbf
        c <C>
        gamma <gamma>
        tolerance <tol>
        classes <label> ...
        scaler none | scaler standard
        scaler_location <v> ...        (only with a scaler)
        scaler_spread <v> ...
        meta <key> <value>             (zero or more)
        machine <lo> <hi> <bias> <n_sv> <converged 0|1>
        <dual_coef> <v0> <v1> ...      (n_sv lines)
    """
    p = model.params
    lines = [f"mbmdetect-svm {FORMAT_VERSION}", "kernel rbf", f"c {_fmt(p.c)}",
             f"gamma {_fmt(p.gamma)}", f"tolerance {_fmt(p.tolerance)}",
             "classes " + " ".join(str(c) for c in model.classes)]
    if model.scaler is None:
        lines.append("scaler none")
    else:
        lines.append(f"scaler {model.scaler.method}")
        lines.append("scaler_location " + " ".join(map(_fmt, model.scaler.location)))
        lines.append("scaler_spread " + " ".join(map(_fmt, model.scaler.spread)))
    meta = dict(model.meta)
    meta.setdefault("n_features", str(model.n_features))
    for key, value in sorted(meta.items()):
        lines.append(f"meta {key} {value}")
    for (lo, hi), m in model.machines.items():
        lines.append(f"machine {lo} {hi} {_fmt(m.bias)} {len(m.dual_coefs)} {int(m.converged)}")
        for coef, sv in zip(m.dual_coefs, m.support_vectors):
            lines.append(" ".join([_fmt(coef)] + [_fmt(v) for v in sv]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path) -> SvmModel:
    lines = Path(path).read_text().splitlines()
    try:
        magic, version = lines[0].split()
        if magic != "mbmdetect-svm" or int(version) != FORMAT_VERSION:
            raise ModelFormatError(f"{path}: not a mbmdetect model (version {version})")
        head = {}
        meta = {}
        i = 1
        while i < len(lines) and not lines[i].startswith("machine "):
            key, _, rest = lines[i].partition(" ")
            if key == "meta":
                mk, _, mv = rest.partition(" ")
                meta[mk] = mv
            else:
                head[key] = rest
            i += 1
        params = SvmParams(float(head["c"]), float(head["gamma"]), float(head["tolerance"]))
        classes = tuple(int(c) for c in head["classes"].split())
        scaler = None
        if head.get("scaler", "none") != "none":
            scaler = FeatureScaler(tuple(map(float, head["scaler_location"].split())),
                                   tuple(map(float, head["scaler_spread"].split())),
                                   head["scaler"])
        machines = {}
        while i < len(lines):
            _, lo, hi, bias, n_sv, conv = lines[i].split()
            rows = [list(map(float, ln.split())) for ln in lines[i + 1:i + 1 + int(n_sv)]]
            arr = np.array(rows, dtype=np.float64).reshape(int(n_sv), -1)
            machines[(int(lo), int(hi))] = BinarySvm(
                arr[:, 1:].copy(), arr[:, 0].copy(), float(bias), params.gamma,
                (int(lo), int(hi)), conv == "1")
            i += 1 + int(n_sv)
    except (ValueError, KeyError, IndexError) as exc:
        raise ModelFormatError(f"{path}: malformed model file ({exc})") from None
    return SvmModel(params, classes, machines, scaler, meta)
