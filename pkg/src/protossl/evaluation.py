"""Metrics, bootstrap intervals, experimental conditions and benchmark tables."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import adapt, assign
from .datagen import Corpus, Dataset, nested_subsets
from .numcore import Rng
from .protomodel import ProtoModel

log = logging.getLogger(__name__)

CONDITIONS = ("protossl_probe", "protossl_tuned", "supproto_direct", "supproto_pretrained",
              "random_assign", "pit", "pip")


class MetricError(ValueError):
    pass


# --- metrics ----------------------------------------------------------------

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    # tie blocks share the mean of their 1-based ranks
    bounds = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(x)]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs at least one positive and one negative")
    r = _midranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auroc(S: np.ndarray, Y: np.ndarray) -> tuple[float, list[float]]:
    per = [auroc(S[:, l], Y[:, l]) for l in range(Y.shape[1])]
    return float(np.mean(per)), per


def _strata(Y: np.ndarray) -> list[np.ndarray]:
    _, inv = np.unique(Y > 0, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    return [np.flatnonzero(inv == g) for g in range(inv.max() + 1)]


def bootstrap_ci(S: np.ndarray, Y: np.ndarray, resamples: int, rng, level: float = 0.95):
    """Point macro AUROC and a percentile interval over stratified resamples.

    Rows are resampled with replacement within groups of identical label
    vectors, so every label keeps both classes and the test size is preserved.
    """
    if resamples < 1:
        raise ValueError("bootstrap_ci: resamples must be >= 1")
    S = np.asarray(S, dtype=np.float64)
    Y = np.asarray(Y)
    point, _ = macro_auroc(S, Y)
    strata = _strata(Y)
    stats = np.empty(resamples)
    for r in range(resamples):
        idx = np.concatenate([g[rng.integers(0, len(g), size=len(g))] for g in strata])
        stats[r] = macro_auroc(S[idx], Y[idx])[0]
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    # a percentile interval can miss a skewed point estimate; widen to contain it
    return point, float(min(lo, point)), float(max(hi, point))


@dataclass
class EvalReport:
    condition: str
    seed: int
    size: int
    macro: float
    lo: float
    hi: float
    per_label: list
    runtimes: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


# --- conditions -------------------------------------------------------------

@dataclass
class SeedContext:
    """Everything a seed's cells share: data, pretrained bank, cached source model."""

    seed: int
    corpus: Corpus
    ssl_model: ProtoModel
    cfg: object                       # PipelineConfig
    source_model: ProtoModel | None = None
    cache: dict = field(default_factory=dict)


def _probe_and_test(model: ProtoModel, train: Dataset, test: Dataset, cfg, rows=None,
                    slot_labels=None):
    A_tr = adapt.slot_features(model, train.X, rows)
    clf = adapt.train_probe(A_tr, train.Y, cfg.probe.C, cfg.probe.tol, cfg.probe.max_iter,
                            train.labels)
    S = clf.decision(adapt.slot_features(model, test.X, rows))
    extra = {}
    if slot_labels is not None:
        extra["coefficients"] = adapt.coefficient_report(clf, slot_labels)
    return S, clf, extra


def lap_assign(model: ProtoModel, train: Dataset, M: int, cfg, rng: Rng):
    """Score the bank on ``train`` and return ``(assigned model, assignment, times)``."""
    t0 = time.perf_counter()
    A, _ = model.activations(train.X)
    t1 = time.perf_counter()
    Q = assign.score(A, train.Y, rng.child("balance"), cfg.assign.balance,
                     cfg.assign.replicates, train.labels)
    t2 = time.perf_counter()
    asg = assign.solve_lap(Q.Q, train.Y.shape[1], M)
    t3 = time.perf_counter()
    m = model.copy()
    m.bank = assign.apply(m.bank, asg)
    return m, asg, {"activations_s": t1 - t0, "score_s": t2 - t1, "solve_s": t3 - t2}


def _clear(model: ProtoModel) -> ProtoModel:
    m = model.copy()
    m.bank.assigned = [None] * m.bank.K
    return m


def source_model(ctx: SeedContext) -> ProtoModel:
    """Supervised prototype model trained on the disjoint source task (cached)."""
    if ctx.source_model is not None:
        return ctx.source_model
    cfg, corpus = ctx.cfg, ctx.corpus
    if corpus.source_train is None:
        raise ValueError("corpus has no source task; set gen.n_source_labels > 0")
    L_src = corpus.source_train.Y.shape[1]
    L = corpus.train.Y.shape[1]
    M_src = max(cfg.eval.source_M, -(-L * cfg.assign.M // L_src))
    rng = Rng(ctx.seed, "source")
    m = _direct_model(ctx.corpus.source_train, L_src, M_src, cfg, rng)
    m, _ = adapt.finetune(m, corpus.source_train, corpus.source_val, cfg.finetune,
                          rng.child("finetune"))
    if not cfg.project.noproj:
        m = adapt.project(m, corpus.source_train, "label_supervised")
    ctx.source_model = m
    return m


def _direct_model(train: Dataset, L: int, M: int, cfg, rng: Rng) -> ProtoModel:
    g, p = cfg.gen, cfg.pretrain
    m = ProtoModel.init(g.channels, g.window_spec, L * M, p.hidden, p.dim, rng.child("init"))
    m.bank.assigned = [(k // M, k % M) for k in range(L * M)]
    return m


def run_condition(name: str, ctx: SeedContext, train: Dataset, rng: Rng, M: int | None = None):
    """Train one condition on ``train`` and return ``(test scores, extra, runtimes)``."""
    cfg, corpus = ctx.cfg, ctx.corpus
    test, val = corpus.test, corpus.val
    L = train.Y.shape[1]
    M = cfg.assign.M if M is None else M
    times = {}
    t0 = time.perf_counter()
    if name in ("protossl_probe", "protossl_tuned"):
        m, asg, times = lap_assign(ctx.ssl_model, train, M, cfg, rng)
        if name == "protossl_tuned":
            m, _ = adapt.finetune(m, train, val, cfg.finetune, rng.child("finetune"))
        m = adapt.project(m, train, "label_supervised")
        rows, labels, _ = adapt.slot_layout(m)
        S, _, extra = _probe_and_test(m, train, test, cfg, rows, labels)
        extra["objective"] = asg.objective
    elif name == "random_assign":
        asg = assign.random_assignment(ctx.ssl_model.bank.K, L, M, rng.child("random"))
        m = ctx.ssl_model.copy()
        m.bank = assign.apply(m.bank, asg)
        m = adapt.project(m, train, "label_supervised")
        rows, labels, _ = adapt.slot_layout(m)
        S, _, extra = _probe_and_test(m, train, test, cfg, rows, labels)
    elif name == "supproto_direct":
        m = _direct_model(train, L, M, cfg, rng)
        m, _ = adapt.finetune(m, train, val, cfg.finetune, rng.child("finetune"))
        m = adapt.project(m, train, "label_supervised")
        rows, labels, _ = adapt.slot_layout(m)
        S, _, extra = _probe_and_test(m, train, test, cfg, rows, labels)
    elif name == "supproto_pretrained":
        src = _clear(source_model(ctx))
        m, asg, times = lap_assign(src, train, M, cfg, rng)
        m = adapt.project(m, train, "label_supervised")
        rows, labels, _ = adapt.slot_layout(m)
        S, _, extra = _probe_and_test(m, train, test, cfg, rows, labels)
    elif name in ("pit", "pip"):
        rows = np.arange(ctx.ssl_model.bank.K)
        m = adapt.project(ctx.ssl_model, train, name, corpus.pretrain, rows=rows)
        S, _, extra = _probe_and_test(m, train, test, cfg, rows)
    else:
        raise ValueError(f"unknown condition {name!r}; expected one of {CONDITIONS}")
    times = dict(times)
    times["total_s"] = time.perf_counter() - t0
    return S, extra, times


def evaluate(name: str, ctx: SeedContext, train: Dataset, size: int, M: int | None = None):
    rng = Rng(ctx.seed, f"cell/{name}/{size}")
    S, extra, times = run_condition(name, ctx, train, rng, M)
    test = ctx.corpus.test
    macro, lo, hi = bootstrap_ci(S, test.Y, ctx.cfg.eval.resamples, rng.child("bootstrap"))
    _, per = macro_auroc(S, test.Y)
    return EvalReport(name, ctx.seed, size, macro, lo, hi, per, times, extra)


def run_matrix(ctx: SeedContext, conditions, sizes):
    """Every (condition, size) cell for one seed.

    Failed cells are logged and reported in the second return value; the other
    cells still run.
    """
    train = ctx.corpus.train
    sizes = sorted({int(s) for s in sizes}, reverse=True)
    subsets = nested_subsets(train, sizes, Rng(ctx.seed, "subsets"))
    reports, failures = [], []
    for size, idx in zip(sizes, subsets):
        sub = train.subset(idx)
        for name in conditions:
            try:
                reports.append(evaluate(name, ctx, sub, size))
            except Exception as exc:          # one failed cell must not sink the matrix
                log.error("cell %s/%d/seed %d failed: %s", name, size, ctx.seed, exc)
                failures.append({"condition": name, "size": size, "seed": ctx.seed,
                                 "error": f"{type(exc).__name__}: {exc}"})
    return reports, failures


RESULT_COLUMNS = ("condition", "size", "seed", "macro_auroc", "ci_lo", "ci_hi", "label",
                  "auroc")


def reports_csv(reports) -> str:
    """Long form: one row per (report, label) plus a ``macro`` row per report."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in reports:
        for l, a in enumerate(r.per_label):
            w.writerow([r.condition, r.size, r.seed, repr(r.macro), repr(r.lo), repr(r.hi),
                        l, repr(a)])
        w.writerow([r.condition, r.size, r.seed, repr(r.macro), repr(r.lo), repr(r.hi),
                    "macro", repr(r.macro)])
    return buf.getvalue()


def read_reports_csv(text: str) -> list[dict]:
    return [row for row in csv.DictReader(io.StringIO(text)) if row["label"] == "macro"]


def summarize(rows: list[dict]) -> dict:
    """Mean macro AUROC (and mean CI bounds) per (condition, size) over seeds."""
    cells: dict = {}
    for row in rows:
        key = (row["condition"], int(row["size"]))
        cells.setdefault(key, []).append(row)
    out = []
    for (cond, size), rs in sorted(cells.items()):
        out.append({
            "condition": cond, "size": size, "seeds": sorted(int(r["seed"]) for r in rs),
            "macro_auroc": float(np.mean([float(r["macro_auroc"]) for r in rs])),
            "ci_lo": float(np.mean([float(r["ci_lo"]) for r in rs])),
            "ci_hi": float(np.mean([float(r["ci_hi"]) for r in rs])),
        })
    return {"cells": out}


def curves_tsv(summary: dict) -> str:
    """Label-efficiency table: one row per size, one column per condition."""
    conds = sorted({c["condition"] for c in summary["cells"]})
    sizes = sorted({c["size"] for c in summary["cells"]})
    val = {(c["condition"], c["size"]): c["macro_auroc"] for c in summary["cells"]}
    lines = ["size\t" + "\t".join(conds)]
    for s in sizes:
        lines.append(f"{s}\t" + "\t".join(
            repr(val[(c, s)]) if (c, s) in val else "nan" for c in conds))
    return "\n".join(lines) + "\n"


# --- assignment benchmark ---------------------------------------------------

def synthetic_activations(K: int, L: int, N: int, D: int, rng: Rng):
    """Cosine activations of random unit embeddings against random prototypes,
    with labels planted on a few prototype directions."""
    P = rng.normal(size=(K, D))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    Y = (rng.uniform(size=(N, L)) < 0.3).astype(np.float64)
    Y[0], Y[1] = 1.0, 0.0          # both classes present for every label
    E = rng.normal(size=(N, D)) + Y @ P[:L] * 1.5
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    return np.clip(E @ P.T, -1.0, 1.0), Y


def bench_assign(K: int, L: int, M: int, N: int, D: int, seeds, pool_cfg=None,
                 balance: bool = True) -> list[dict]:
    """Wall-clock of score + solve_lap against pool_assign on the same activations."""
    pool_cfg = pool_cfg or assign.PoolConfig()
    rows = []
    for seed in seeds:
        rng = Rng(seed, "bench")
        A, Y = synthetic_activations(K, L, N, D, rng.child("data"))
        t0 = time.perf_counter()
        Q = assign.score(A, Y, rng.child("balance"), balance)
        lap = assign.solve_lap(Q.Q, L, M)
        t_lap = time.perf_counter() - t0
        pool, t_pool = assign.pool_assign_activations(A, Y, M, pool_cfg, rng.child("pool"))
        rows.append({"seed": seed, "K": K, "L": L, "M": M, "N": N, "D": D,
                     "lap_s": t_lap, "pool_s": t_pool,
                     "lap_objective": lap.objective,
                     "pool_objective_q": math.fsum(
                         Q.Q[k, l] for l, _, k in pool.slots)})
    return rows
