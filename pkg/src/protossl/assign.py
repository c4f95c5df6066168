"""Training-free alignment of a prototype bank to downstream label slots.

``score`` turns an activation matrix and binary labels into a standardised
effect size per (prototype, label).  ``solve_lap`` picks an injective map from
the ``L*M`` label slots to prototypes maximising the summed score, using a
shortest-augmenting-path solver on the rectangular cost matrix.  ``pool_assign``
is the gradient-trained alternative kept for comparison.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from . import autodiff as ad
from .numcore import EPS, Rng
from .protomodel import PrototypeBank


class CapacityError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class ScoreMatrix:
    Q: np.ndarray
    mean_pos: np.ndarray
    mean_neg: np.ndarray
    var_pos: np.ndarray
    var_neg: np.ndarray
    replicates: int = 1


def _check_labels(Y: np.ndarray, names=None) -> None:
    pos = Y.sum(axis=0)
    for l, t in enumerate(pos):
        name = names[l] if names else f"label {l}"
        if t == 0:
            raise LabelError(f"{name} has no positive samples")
        if t == len(Y):
            raise LabelError(f"{name} has no negative samples")


def _effect_size(A, Wp, Wn):
    """Weighted class means/variances and Q for weight matrices ``(N, L)``."""
    tp = Wp.sum(axis=0)
    tn = Wn.sum(axis=0)
    mp = A.T @ Wp / tp
    mn = A.T @ Wn / tn
    A2 = A * A
    # population variance, clipped against rounding below zero
    vp = np.maximum(A2.T @ Wp / tp - mp * mp, 0.0)
    vn = np.maximum(A2.T @ Wn / tn - mn * mn, 0.0)
    Q = (mp - mn) / np.sqrt(np.maximum(0.5 * (vp + vn), EPS))
    return Q, mp, mn, vp, vn


def score(A: np.ndarray, Y: np.ndarray, rng: Rng | None = None, balance: bool = False,
          replicates: int = 8, label_names=None) -> ScoreMatrix:
    """Prototype-label association ``Q`` (K x L).

    ``Q = (mean+ - mean-) / sqrt(max(0.5 (var+ + var-), 1e-8))``.  With
    ``balance`` the majority side of every label is resampled with replacement
    to the minority count ``replicates`` times and the resulting Q averaged.
    """
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if A.shape[0] != Y.shape[0]:
        raise ValueError(f"score: A has {A.shape[0]} rows but Y has {Y.shape[0]}")
    _check_labels(Y, label_names)
    # Q is shift invariant per column; centring limits cancellation in E[a^2]-E[a]^2
    mu = A.mean(axis=0)[:, None]
    A = A - mu.T
    if not balance:
        Q, mp, mn, vp, vn = _effect_size(A, Y, 1.0 - Y)
        return ScoreMatrix(Q, mp + mu, mn + mu, vp, vn, 1)
    if rng is None:
        raise ValueError("score: balance=True needs an rng")
    N, L = Y.shape
    acc = None
    for r in range(replicates):
        Wp = np.zeros((N, L))
        Wn = np.zeros((N, L))
        for l in range(L):
            pos = np.flatnonzero(Y[:, l] > 0)
            neg = np.flatnonzero(Y[:, l] == 0)
            minority, majority, min_w, maj_w = (
                (pos, neg, Wp, Wn) if len(pos) <= len(neg) else (neg, pos, Wn, Wp))
            min_w[minority, l] = 1.0
            draw = majority[rng.integers(0, len(majority), size=len(minority))]
            maj_w[:, l] = np.bincount(draw, minlength=N)
        parts = _effect_size(A, Wp, Wn)
        acc = list(parts) if acc is None else [a + b for a, b in zip(acc, parts)]
    Q, mp, mn, vp, vn = (a / replicates for a in acc)
    return ScoreMatrix(Q, mp + mu, mn + mu, vp, vn, replicates)


# --- rectangular assignment ------------------------------------------------

def _shortest_augmenting_path(cost: np.ndarray):
    """Min-cost assignment of every row to a distinct column (rows <= cols).

    Successive shortest augmenting paths with row/column potentials.  Returns
    ``(col_of_row, u, v)`` where ``u_i + v_j <= cost_ij`` holds everywhere with
    equality on matched pairs, and ``v <= 0`` is nonzero only on matched columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)      # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            cols = np.flatnonzero(used)
            u[p[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _objective(gain: np.ndarray, cols: np.ndarray) -> float:
    return math.fsum(gain[np.arange(len(cols)), cols])


def _complete(tight, must, cols, s, n, m):
    """Rows ``> s`` re-matched over tight edges with rows ``<= s`` fixed.

    Every column outside ``cols[:s+1]`` must end up either matched to a row or
    free-able (not in ``must``).  Returns new ``cols`` or ``None``.
    """
    fixed = set(int(c) for c in cols[: s + 1])
    rest = list(range(s + 1, n))
    avail = [j for j in range(m) if j not in fixed]
    if not rest:
        return cols.copy() if not any(must[j] for j in avail) else None
    R = len(rest)
    src, sink, pool = 0, 1, 2
    row_node = {r: 3 + i for i, r in enumerate(rest)}
    col_node = {j: 3 + R + i for i, j in enumerate(avail)}
    a, b, c = [], [], []
    for r in rest:
        a.append(src); b.append(row_node[r]); c.append(1)
        for j in np.flatnonzero(tight[r]):
            if int(j) in col_node:
                a.append(row_node[r]); b.append(col_node[int(j)]); c.append(1)
    slack = m - n
    if slack:
        a.append(src); b.append(pool); c.append(slack)
        for j in avail:
            if not must[j]:
                a.append(pool); b.append(col_node[j]); c.append(1)
    for j in avail:
        a.append(col_node[j]); b.append(sink); c.append(1)
    V = 3 + R + len(avail)
    G = csr_matrix((np.asarray(c, dtype=np.int32), (a, b)), shape=(V, V))
    res = maximum_flow(G, src, sink)
    if res.flow_value != len(avail):
        return None
    flow = res.flow.tocoo()
    out = cols.copy()
    inv_col = {node: j for j, node in col_node.items()}
    inv_row = {node: r for r, node in row_node.items()}
    for x, y, f in zip(flow.row, flow.col, flow.data):
        if f > 0 and x in inv_row and y in inv_col:
            out[inv_row[x]] = inv_col[y]
    return out


def solve_slots(gain: np.ndarray) -> np.ndarray:
    """Injective slot -> prototype map maximising total ``gain`` (slots x K).

    Among equal-objective optima the lexicographically smallest prototype
    vector (in slot order) is returned.
    """
    gain = np.asarray(gain, dtype=np.float64)
    n, m = gain.shape
    if n > m:
        raise CapacityError(f"{n} slots exceed {m} prototypes (need K >= L*M)")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cost = -gain
    cols, u, v = _shortest_augmenting_path(cost)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-9 * scale
    tight = (cost - u[:, None] - v[None, :]) <= tol
    must = v < -tol
    best = _objective(gain, cols)
    # identical rows (replicated label columns) are interchangeable: sort within
    _, group = np.unique(gain, axis=0, return_inverse=True)
    group = np.asarray(group).ravel()
    for gid in np.unique(group):
        rows = np.flatnonzero(group == gid)
        cols[rows] = np.sort(cols[rows])
    for s in range(n):
        held = set(int(c) for c in cols[:s])
        for k in np.flatnonzero(tight[s]):
            if k >= cols[s]:
                break
            if int(k) in held:
                continue
            trial = cols.copy()
            if k in trial[s + 1:]:
                trial[np.flatnonzero(trial == k)[0]] = cols[s]
            trial[s] = k
            cand = _complete(tight, must, trial, s, n, m)
            if cand is not None and _objective(gain, cand) >= best:
                cols = cand
                best = _objective(gain, cols)
                break
    return cols


@dataclass
class SlotAssignment:
    slots: list                     # (label, slot, prototype) ordered by (label, slot)
    objective: float
    Q: np.ndarray = field(repr=False)
    L: int = 0
    M: int = 0

    @property
    def prototypes(self) -> np.ndarray:
        return np.array([k for _, _, k in self.slots], dtype=np.int64)

    @property
    def slot_labels(self) -> np.ndarray:
        return np.array([l for l, _, _ in self.slots], dtype=np.int64)

    def check(self, K: int) -> None:
        protos = self.prototypes
        if len(protos) != self.L * self.M:
            raise AssertionError("slot coverage incomplete")
        if len(set(protos.tolist())) != len(protos):
            raise AssertionError("prototype assigned to more than one slot")
        if protos.min(initial=0) < 0 or protos.max(initial=0) >= K:
            raise AssertionError("prototype index out of range")

    def report(self, names=None) -> dict:
        rows = []
        for l, m, k in self.slots:
            q = self.Q[k, l] if self.Q.shape[1] == self.L else self.Q[k, l * self.M + m]
            rows.append({"label": names[l] if names else int(l), "slot": int(m),
                         "prototype": int(k), "q": float(q)})
        return {"slots": rows, "objective": self.objective, "L": self.L, "M": self.M}


def _check_capacity(K, L, M):
    if K < L * M:
        raise CapacityError(
            f"capacity: L*M = {L}*{M} = {L * M} label slots exceed K = {K} prototypes; "
            f"assignment requires K >= L*M")


def solve_lap(Q: np.ndarray, L: int, M: int) -> SlotAssignment:
    """Exact rectangular assignment of ``L*M`` slots, each label column used M times."""
    Q = np.asarray(Q, dtype=np.float64)
    K = Q.shape[0]
    if Q.shape[1] != L:
        raise ValueError(f"solve_lap: Q has {Q.shape[1]} label columns, expected {L}")
    _check_capacity(K, L, M)
    labels = np.repeat(np.arange(L), M)
    gain = Q[:, labels].T
    cols = solve_slots(gain)
    slots = [(int(l), int(i % M), int(k)) for i, (l, k) in enumerate(zip(labels, cols))]
    return SlotAssignment(slots, _objective(gain, cols), Q, L, M)


def apply(bank: PrototypeBank, assignment: SlotAssignment) -> PrototypeBank:
    """Copy of ``bank`` whose provenance marks the chosen prototypes' slots."""
    assigned = [None] * bank.K
    for l, m, k in assignment.slots:
        if not 0 <= k < bank.K:
            raise IndexError(f"prototype {k} outside bank of size {bank.K}")
        assigned[k] = (int(l), int(m))
    return PrototypeBank(bank.P.copy(), assigned, list(bank.source))


def random_assignment(K: int, L: int, M: int, rng: Rng) -> SlotAssignment:
    """Uniform injective slot map (control condition)."""
    _check_capacity(K, L, M)
    protos = rng.gen.permutation(K)[: L * M]
    slots = [(i // M, i % M, int(k)) for i, k in enumerate(protos)]
    return SlotAssignment(slots, float("nan"), np.zeros((K, L)), L, M)


# --- gradient-trained pool assignment --------------------------------------

@dataclass
class PoolConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 0.01
    weight_decay: float = 0.0
    ortho_weight: float = 1.0
    init_scale: float = 0.01


def pool_assign_activations(A: np.ndarray, Y: np.ndarray, M: int, cfg: PoolConfig,
                            rng: Rng):
    """Learn a soft K x (L*M) slot map by gradient descent, then harden it.

    Each slot holds a softmax over prototypes; slot activations feed a linear
    multilabel head trained with binary cross-entropy, plus a penalty on the
    overlap of same-label slot distributions.  The learned probabilities are
    hardened with ``solve_slots``.  Returns ``(assignment, seconds)``.
    """
    t0 = time.perf_counter()
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    N, K = A.shape
    L = Y.shape[1]
    _check_capacity(K, L, M)
    S = L * M
    labels = np.repeat(np.arange(L), M)
    same = (labels[:, None] == labels[None, :]) & ~np.eye(S, dtype=bool)
    n_pairs = max(int(same.sum()), 1)
    init = rng.child("init")
    logits = ad.param(cfg.init_scale * init.normal(size=(K, S)), "logits")
    W = ad.param(cfg.init_scale * init.normal(size=(S, L)), "head.W")
    b = ad.param(np.zeros(L), "head.b")
    params = {"logits": logits, "head.W": W, "head.b": b}
    state = ad.AdamWState()
    order = rng.child("order")
    for _ in range(cfg.epochs):
        perm = order.gen.permutation(N)
        for s in range(0, N, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            soft = ad.softmax(logits, axis=0)
            z = ad.add(ad.matmul(ad.matmul(ad.const(A[idx]), soft), W), b)
            bce = ad.mean(ad.sub(ad.softplus(z), ad.mul(z, Y[idx])))
            gram = ad.matmul(ad.transpose(soft), soft)
            ortho = ad.scale(ad.sum(ad.mul(gram, same.astype(float))), 1.0 / n_pairs)
            loss = ad.add(bce, ad.scale(ortho, cfg.ortho_weight))
            if not np.isfinite(loss.value):
                raise FloatingPointError("pool_assign: non-finite loss")
            ad.backward(loss)
            raw = {k: t.value for k, t in params.items()}
            ad.adamw_step(raw, {k: t.grad for k, t in params.items()}, state, cfg.lr,
                          cfg.weight_decay)
            for t in params.values():
                t.grad = None
    soft = ad.softmax(ad.const(logits.value), axis=0).value
    cols = solve_slots(soft.T)
    # canonical order within a label: slots are interchangeable
    for l in range(L):
        cols[l * M:(l + 1) * M] = np.sort(cols[l * M:(l + 1) * M])
    slots = [(int(labels[i]), int(i % M), int(k)) for i, k in enumerate(cols)]
    objective = _objective(soft.T, cols)
    return SlotAssignment(slots, objective, soft, L, M), time.perf_counter() - t0
