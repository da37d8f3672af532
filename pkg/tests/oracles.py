"""Independent reference implementations used only by the tests."""
import itertools

import numpy as np


def brute_force_dual(X, y, C, gamma):
    """Exact maximiser of the soft-margin SVM dual by face enumeration.

    Every point of the box is on exactly one face: each alpha is at 0, at C,
    or free.  On a face the optimum of the concave objective subject to
    y'a = 0 solves a small KKT system; the global optimum is the best
    feasible face optimum.  Cost ~3^n, fine for n <= 8.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    K = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            d = X[a] - X[b]
            K[a, b] = np.exp(-gamma * float(d @ d))
    Q = K * np.outer(y, y)
    best_val, best_alpha = -np.inf, None

    def objective(alpha):
        return alpha.sum() - 0.5 * alpha @ Q @ alpha

    for k in range(n + 1):
        for free in itertools.combinations(range(n), k):
            free = list(free)
            bound = [t for t in range(n) if t not in free]
            # every 0/C assignment of the bound variables, as columns
            combos = np.array(list(itertools.product((0.0, C), repeat=len(bound))), dtype=float)
            if len(bound) == 0:
                combos = np.zeros((1, 0))
            alphas = np.zeros((len(combos), n))
            alphas[:, bound] = combos
            if not free:
                feasible = np.abs(alphas @ y) <= 1e-12 * max(C, 1.0)
                cand = alphas[feasible]
            else:
                F = np.array(free)
                A = np.zeros((k + 1, k + 1))
                A[:k, :k] = Q[np.ix_(F, F)]
                A[:k, k] = y[F]
                A[k, :k] = y[F]
                rhs = np.zeros((k + 1, len(combos)))
                rhs[:k] = 1.0 - Q[np.ix_(F, bound)] @ combos.T if bound else 1.0
                rhs[k] = -(combos @ y[bound]) if bound else 0.0
                try:
                    sol = np.linalg.solve(A, rhs)
                except np.linalg.LinAlgError:
                    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
                af = sol[:k].T
                ok = np.all((af >= -1e-12) & (af <= C + 1e-12), axis=1)
                alphas[:, F] = np.clip(af, 0.0, C)
                cand = alphas[ok]
            for alpha in cand:
                val = objective(alpha)
                if val > best_val:
                    best_val, best_alpha = val, alpha.copy()
    return best_val, best_alpha, K


def oracle_bias(alpha, K, y, C, eps=1e-9):
    """Bias from the KKT conditions (mean over free vectors, else midpoint)."""
    f = K @ (alpha * y)
    free = (alpha > eps) & (alpha < C - eps)
    if free.any():
        return float(np.mean(y[free] - f[free]))
    lo, hi = -np.inf, np.inf
    for t in range(len(y)):
        r = y[t] - f[t]
        at_zero = alpha[t] <= eps
        # at zero: y*(f+b) >= 1 ; at C: y*(f+b) <= 1
        if (y[t] > 0) == at_zero:
            lo = max(lo, r)
        else:
            hi = min(hi, r)
    if np.isinf(lo):
        return hi
    if np.isinf(hi):
        return lo
    return (lo + hi) / 2


def brute_force_vi(gen_a, gen_b):
    """Unstable-macroblock average recomputed from raw fields.

    Deliberately avoids MacroblockMode.__eq__, mbm_equal and indicator.
    """
    total = 0
    n_p = 0
    for fa, fb in zip(gen_a, gen_b):
        if fa.frame_type.value != "P":
            continue
        n_p += 1
        for y in range(fa.rows):
            for x in range(fa.cols):
                a, b = fa.cells[y][x], fb.cells[y][x]
                ta, tb = a.mb_type, b.mb_type
                same = (ta.kind.value == tb.kind.value and ta.partition.value == tb.partition.value
                        and ta.raw == tb.raw)
                if same and ta.kind.value not in ("skip", "intra4x4", "intra16x16"):
                    va = sorted((m.block_y, m.block_x, int(m.direction), m.block_h, m.block_w, m.dy, m.dx)
                                for m in a.mvs)
                    vb = sorted((m.block_y, m.block_x, int(m.direction), m.block_h, m.block_w, m.dy, m.dx)
                                for m in b.mvs)
                    same = va == vb
                total += 0 if same else 1
    return total / n_p
