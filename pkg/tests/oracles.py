"""Independent reference implementations used only by the tests.

Everything here is written with plain loops or brute force so that it shares
no code path with the package.
"""

import itertools
import math

import numpy as np


def brute_force_lap(Q, L, M):
    """Best total q over injective maps of L*M slots (label-major) to K rows.

    Returns ``(best objective, lexicographically smallest optimal tuple)``.
    """
    K = len(Q)
    labels = [l for l in range(L) for _ in range(M)]
    best, arg = -math.inf, None
    for perm in itertools.permutations(range(K), len(labels)):
        v = math.fsum(Q[k][l] for k, l in zip(perm, labels))
        if v > best:
            best, arg = v, perm
    return best, arg


def q_score_loops(a, y, eps=1e-8):
    """Effect size for one activation column with plain Python sums."""
    pos = [ai for ai, yi in zip(a, y) if yi]
    neg = [ai for ai, yi in zip(a, y) if not yi]
    mp = sum(pos) / len(pos)
    mn = sum(neg) / len(neg)
    vp = sum((x - mp) ** 2 for x in pos) / len(pos)
    vn = sum((x - mn) ** 2 for x in neg) / len(neg)
    return (mp - mn) / math.sqrt(max(0.5 * (vp + vn), eps))


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def nt_xent_loops(Z, tau):
    n2 = len(Z)
    Zn = [z / np.linalg.norm(z) for z in Z]
    total = 0.0
    for i in range(n2):
        j = i + 1 if i % 2 == 0 else i - 1
        den = sum(math.exp(float(Zn[i] @ Zn[k]) / tau) for k in range(n2) if k != i)
        total += -math.log(math.exp(float(Zn[i] @ Zn[j]) / tau) / den)
    return total / n2


def koleo_loops(P, floor=1e-8):
    Pn = [p / np.linalg.norm(p) for p in P]
    total = 0.0
    for k, pk in enumerate(Pn):
        d = min(float(np.linalg.norm(pk - pi)) for i, pi in enumerate(Pn) if i != k)
        total += math.log(max(d, floor))
    return -total / len(Pn)


def logistic_objective(X, y, w, b, C):
    z = X @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + w @ w / (2 * C * len(y)))


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a))),
                                              float(np.max(np.abs(b)))))
