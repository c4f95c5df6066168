"""Target adaptation: supervised prototype losses, fine-tuning, projection and probes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import autodiff as ad
from .datagen import Dataset
from .numcore import EPS, Rng, row_normalize, zscore_apply, zscore_fit_apply
from .protomodel import ProtoModel, activation_graph, activations_from_embeddings, embed_windows
from .ssl import TrainingAborted

log = logging.getLogger(__name__)

DIV_MARGIN = 0.3


class SlotError(ValueError):
    pass


@dataclass
class SupLossWeights:
    clst: float = 0.004
    sep: float = 0.0004
    div: float = 250.0
    cntrst: float = 300.0

    def validate(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"finetune.weights.{k} must be >= 0, got {v}")


def slot_layout(model: ProtoModel) -> tuple[np.ndarray, np.ndarray, int]:
    """``(rows, labels, M)``: assigned bank rows in (label, slot) order."""
    rows = model.bank.slot_rows()
    if not rows:
        raise SlotError("no prototypes are assigned to label slots")
    labels = np.array([model.bank.assigned[k][0] for k in rows], dtype=np.int64)
    L = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=L)
    if np.any(counts == 0):
        raise SlotError(f"label {int(np.flatnonzero(counts == 0)[0])} has no assigned slot")
    if np.any(counts != counts[0]):
        raise SlotError("labels have unequal slot counts")
    return np.asarray(rows, dtype=np.int64), labels, int(counts[0])


# --- individual losses (autodiff) ------------------------------------------

def bce_logits(z: ad.Tensor, Y: np.ndarray) -> ad.Tensor:
    """Mean binary cross-entropy from logits: ``softplus(z) - y z``."""
    return ad.mean(ad.sub(ad.softplus(z), ad.mul(z, Y)))


def ce_loss(A_s: ad.Tensor, W: ad.Tensor, b: ad.Tensor, Y: np.ndarray) -> ad.Tensor:
    return bce_logits(ad.add(ad.matmul(A_s, W), b), Y)


def _label_max(A_s: ad.Tensor, L: int, M: int) -> ad.Tensor:
    B = A_s.shape[0]
    return ad.rowwise_max(ad.reshape(A_s, (B, L, M)), axis=2)


def clst_loss(A_s: ad.Tensor, Y: np.ndarray, M: int) -> ad.Tensor:
    """Mean over positive (sample, label) of ``1 - max slot activation``."""
    n = Y.sum()
    if n == 0:
        return ad.const(0.0)
    best = _label_max(A_s, Y.shape[1], M)
    return ad.scale(ad.sum(ad.mul(ad.sub(1.0, best), Y)), 1.0 / n)


def sep_loss(A_s: ad.Tensor, Y: np.ndarray, M: int) -> ad.Tensor:
    """Mean over negative (sample, label) of ``relu(max slot activation)``."""
    neg = 1.0 - Y
    n = neg.sum()
    if n == 0:
        return ad.const(0.0)
    best = _label_max(A_s, Y.shape[1], M)
    return ad.scale(ad.sum(ad.mul(ad.relu(best), neg)), 1.0 / n)


def div_loss(P_s: ad.Tensor, labels: np.ndarray, margin: float = DIV_MARGIN) -> ad.Tensor:
    """Mean over same-label prototype pairs of ``relu(cos - margin)^2``."""
    labels = np.asarray(labels)
    mask = np.triu(labels[:, None] == labels[None, :], k=1).astype(float)
    n = mask.sum()
    if n == 0:
        return ad.const(0.0)
    C = ad.cosine_sim_matrix(P_s, P_s)
    return ad.scale(ad.sum(ad.mul(ad.square(ad.relu(ad.sub(C, margin))), mask)), 1.0 / n)


def cntrst_loss(P_s: ad.Tensor, labels: np.ndarray, Y: np.ndarray) -> ad.Tensor:
    """``sum_{l<l'} f_ll' (1 - mean cos between slots of l and l')``.

    ``f_ll'`` is the fraction of batch samples carrying both labels.
    """
    labels = np.asarray(labels)
    L = Y.shape[1]
    E = np.zeros((len(labels), L))
    E[np.arange(len(labels)), labels] = 1.0
    E /= E.sum(axis=0, keepdims=True)
    F = np.triu(Y.T @ Y / len(Y), k=1)
    if not F.any():
        return ad.const(0.0)
    C = ad.cosine_sim_matrix(P_s, P_s)
    block = ad.matmul(ad.matmul(ad.const(E.T), C), ad.const(E))   # (L, L) mean cross cosine
    return ad.sum(ad.mul(ad.sub(1.0, block), F))


def sup_losses(model: ProtoModel, p: dict, Xb: np.ndarray, Yb: np.ndarray,
               labels: np.ndarray, M: int, weights: SupLossWeights) -> tuple[ad.Tensor, dict]:
    """``CE + l_clst Clst + l_sep Sep + l_div Div + l_cntrst Cntrst``.

    ``p`` holds the encoder parameters, ``slots.P`` (slot prototypes in (label,
    slot) order) and the linear head ``cls.W``/``cls.b``.
    """
    P_s = p["slots.P"]
    A_s = activation_graph(model.encoder, p, P_s, Xb, model.window)
    parts = {
        "ce": ce_loss(A_s, p["cls.W"], p["cls.b"], Yb),
        "clst": clst_loss(A_s, Yb, M),
        "sep": sep_loss(A_s, Yb, M),
        "div": div_loss(P_s, labels),
        "cntrst": cntrst_loss(P_s, labels, Yb),
    }
    total = parts["ce"]
    for k in ("clst", "sep", "div", "cntrst"):
        w = getattr(weights, k)
        if w:
            total = ad.add(total, ad.scale(parts[k], w))
    return total, parts


# --- fine-tuning ------------------------------------------------------------

@dataclass
class FinetuneConfig:
    max_epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    head_C: float = 1.0
    weights: SupLossWeights = field(default_factory=SupLossWeights)

    def validate(self):
        if self.max_epochs < 0:
            raise ValueError("finetune.max_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("finetune.batch_size must be >= 1")
        if self.head_C <= 0:
            raise ValueError("finetune.head_C must be > 0")
        self.weights.validate()


def _ft_params(model: ProtoModel, rows, L, M, head=None) -> dict[str, np.ndarray]:
    t = dict(model.encoder.params())
    t["slots.P"] = model.bank.P[rows].copy()
    if head is None:
        head = (np.zeros((L * M, L)), np.zeros(L))
    t["cls.W"], t["cls.b"] = head[0].copy(), head[1].copy()
    return t


def _head_init(model: ProtoModel, rows, train: Dataset, C: float):
    """Logistic probe on the slot activations, folded back to raw-activation units."""
    clf = train_probe(slot_features(model, train.X, rows), train.Y, C, label_names=train.labels)
    W = clf.W / np.maximum(clf.stds, EPS)[:, None]
    return W, clf.b - clf.means @ W


def _eval_sup(model, raw, X, Y, labels, M, weights, batch=256) -> float:
    p = {k: ad.const(v) for k, v in raw.items()}
    total = 0.0
    for s in range(0, len(X), batch):
        loss, _ = sup_losses(model, p, X[s:s + batch], Y[s:s + batch], labels, M, weights)
        total += float(loss.value) * len(X[s:s + batch])
    return total / len(X)


def _install(model: ProtoModel, raw: dict, rows) -> None:
    for k in ("W1", "b1", "W2", "b2"):
        setattr(model.encoder, k, raw["enc." + k].copy())
    P = model.bank.P.copy()
    P[rows] = raw["slots.P"]
    model.bank.P = P


def finetune(model: ProtoModel, train: Dataset, val: Dataset, cfg: FinetuneConfig, rng: Rng):
    """AdamW on encoder, assigned prototypes and a linear CE head.

    The head starts from a logistic probe fit on the slot activations of
    ``train`` so that early updates to the encoder follow a meaningful signal.

    Returns ``(model, curve)``; the best-validation state is kept.  Unassigned
    prototypes and the projection head are left untouched.
    """
    cfg.validate()
    model = model.copy()
    rows, labels, M = slot_layout(model)
    L = int(labels.max()) + 1
    if train.Y.shape[1] != L:
        raise SlotError(f"model has slots for {L} labels, data has {train.Y.shape[1]}")
    raw = _ft_params(model, rows, L, M, _head_init(model, rows, train, cfg.head_C))
    w = cfg.weights
    lr = cfg.lr
    curve = []
    best = _eval_sup(model, raw, val.X, val.Y, labels, M, w)
    curve.append({"epoch": 0, "train_loss": _eval_sup(model, raw, train.X, train.Y, labels,
                                                      M, w),
                  "val_loss": best, "lr": lr})
    best_raw = {k: v.copy() for k, v in raw.items()}
    bad_plateau = bad_stop = 0
    state = ad.AdamWState()
    order = rng.child("order")
    for epoch in range(1, cfg.max_epochs + 1):
        perm = order.gen.permutation(len(train))
        tot, steps = 0.0, 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[s:s + cfg.batch_size])
            p = {k: ad.param(v, k) for k, v in raw.items()}
            loss, _ = sup_losses(model, p, train.X[idx], train.Y[idx], labels, M, w)
            if not np.isfinite(loss.value):
                _install(model, best_raw, rows)
                raise TrainingAborted(f"non-finite fine-tuning loss at epoch {epoch}", model)
            ad.backward(loss)
            try:
                ad.adamw_step(raw, {k: t.grad for k, t in p.items()}, state, lr,
                              cfg.weight_decay)
            except ad.NonFiniteGradient as exc:
                _install(model, best_raw, rows)
                raise TrainingAborted(str(exc), model) from exc
            tot += float(loss.value)
            steps += 1
        val_loss = _eval_sup(model, raw, val.X, val.Y, labels, M, w)
        curve.append({"epoch": epoch, "train_loss": tot / max(steps, 1), "val_loss": val_loss,
                      "lr": lr})
        log.info("finetune epoch %d val %.4f", epoch, val_loss)
        if val_loss < best:
            best, bad_plateau, bad_stop = val_loss, 0, 0
            best_raw = {k: v.copy() for k, v in raw.items()}
        else:
            bad_plateau += 1
            bad_stop += 1
            if bad_plateau > cfg.plateau_patience:
                lr *= cfg.plateau_factor
                bad_plateau = 0
            if bad_stop >= cfg.early_stop_patience:
                break
    _install(model, best_raw, rows)
    return model, curve


FINETUNE_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


# --- projection -------------------------------------------------------------

PROJECT_MODES = ("label_supervised", "pit", "pip")


def project(model: ProtoModel, train: Dataset, mode: str = "label_supervised",
            pretrain: Dataset | None = None, rows=None, chunk: int = 512) -> ProtoModel:
    """Replace prototypes by the embedding of their best-matching window.

    ``label_supervised`` searches the windows of training samples positive for
    the slot's label; ``pit`` searches every target training window; ``pip``
    searches the pretraining corpus.  ``rows`` defaults to the assigned slots.
    Ties go to the lowest (sample, window) index.
    """
    if mode not in PROJECT_MODES:
        raise ValueError(f"project: mode must be one of {PROJECT_MODES}, got {mode!r}")
    model = model.copy()
    bank = model.bank
    if rows is None:
        rows = slot_layout(model)[0]
    rows = [int(k) for k in rows]
    if mode == "pip":
        if pretrain is None:
            raise ValueError("project: mode 'pip' needs the pretraining corpus")
        pool, tag = pretrain, "pretrain"
    else:
        pool, tag = train, train.split
    if mode == "label_supervised":
        if pool.Y is None:
            raise ValueError("project: label_supervised mode needs labels")
        for k in rows:
            l = bank.assigned[k][0]
            if pool.Y[:, l].sum() == 0:
                name = pool.labels[l] if pool.labels else f"label {l}"
                raise ValueError(f"project: {name} has no positive training sample")
    Pn = row_normalize(bank.P[rows])
    best = np.full(len(rows), -np.inf)
    where = [None] * len(rows)
    P = bank.P.copy()
    n_w = model.window.count(pool.X.shape[-1])
    for s in range(0, len(pool), chunk):
        E = embed_windows(model.encoder, pool.X[s:s + chunk], model.window)
        n, D = len(E), E.shape[2]
        S = row_normalize(E.reshape(n * n_w, D)) @ Pn.T       # (n*n_w, |rows|)
        for j, k in enumerate(rows):
            col = S[:, j]
            if mode == "label_supervised":
                ok = np.repeat(pool.Y[s:s + n, bank.assigned[k][0]] > 0, n_w)
                col = np.where(ok, col, -np.inf)
            flat = int(np.argmax(col))              # first maximum: lowest (sample, window)
            if col[flat] > best[j]:                 # strict: earlier chunks win ties
                best[j] = col[flat]
                i, t = divmod(flat, n_w)
                where[j] = (s + i, t)
                P[k] = E[i, t]
    source = list(bank.source)
    for j, k in enumerate(rows):
        source[k] = (tag, int(where[j][0]), int(where[j][1]))
    bank.P = P
    bank.source = source
    return model


# --- probe ------------------------------------------------------------------

class ProbeError(ValueError):
    pass


def _fit_logistic(X: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-8,
                  max_iter: int = 100):
    """Newton's method on mean BCE + ||w||^2 / (2 C N) with an unpenalised bias."""
    N, d = X.shape
    Xb = np.hstack([X, np.ones((N, 1))])
    reg = np.full(d + 1, 1.0 / (C * N))
    reg[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(th):
        z = Xb @ th
        return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(reg * th * th))

    f = objective(theta)
    it = -1
    for it in range(max_iter):
        z = Xb @ theta
        pr = 1.0 / (1.0 + np.exp(-z))
        g = Xb.T @ (pr - y) / N + reg * theta
        if np.max(np.abs(g)) < tol:
            break
        H = (Xb * (pr * (1 - pr))[:, None]).T @ Xb / N + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    return theta[:-1], float(theta[-1]), it + 1


@dataclass
class Classifier:
    W: np.ndarray          # (F, L)
    b: np.ndarray          # (L,)
    means: np.ndarray
    stds: np.ndarray
    C: float
    iterations: list = field(default_factory=list)

    def decision(self, A: np.ndarray) -> np.ndarray:
        if A.shape[1] != len(self.means):
            raise ValueError(f"classifier expects {len(self.means)} features, got {A.shape[1]}")
        return zscore_apply(A, self.means, self.stds) @ self.W + self.b

    def predict_proba(self, A: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(A)))


def train_probe(A: np.ndarray, Y: np.ndarray, C: float = 0.0005, tol: float = 1e-8,
                max_iter: int = 100, label_names=None) -> Classifier:
    """Per-label L2 logistic regression on z-scored activations."""
    if C <= 0:
        raise ValueError("probe.C must be > 0")
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    for l in range(Y.shape[1]):
        if Y[:, l].min() == Y[:, l].max():
            name = label_names[l] if label_names else f"label {l}"
            raise ProbeError(f"probe: {name} has a single class in the training data")
    Z, means, stds = zscore_fit_apply(A, A)
    W = np.zeros((A.shape[1], Y.shape[1]))
    b = np.zeros(Y.shape[1])
    iters = []
    for l in range(Y.shape[1]):
        W[:, l], b[l], n = _fit_logistic(Z, Y[:, l], C, tol, max_iter)
        iters.append(n)
    return Classifier(W, b, means, stds, C, iters)


def slot_features(model: ProtoModel, X: np.ndarray, rows=None) -> np.ndarray:
    """Activations of ``X`` against the given bank rows (default: assigned slots)."""
    if rows is None:
        rows = slot_layout(model)[0]
    E = embed_windows(model.encoder, X, model.window)
    return activations_from_embeddings(E, model.bank.P[np.asarray(rows)])[0]


# --- coefficient report -----------------------------------------------------

def coefficient_report(clf: Classifier, slot_labels) -> dict:
    """Per-label mean odds ratios of own-label (β⁺) and other (β⁻) coefficients."""
    slot_labels = np.asarray(slot_labels)
    rows = []
    for l in range(clf.W.shape[1]):
        own = slot_labels == l
        or_pos = float(np.mean(np.exp(clf.W[own, l]))) if own.any() else math.nan
        or_neg = float(np.mean(np.exp(clf.W[~own, l]))) if (~own).any() else math.nan
        ratio = or_pos / or_neg if (~own).any() and own.any() else None
        rows.append({"label": l, "or_pos": or_pos, "or_neg": or_neg, "ratio": ratio})
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    return {"labels": rows, "mean_ratio": float(np.mean(ratios)) if ratios else None}


def sign_test(values, threshold: float = 1.0) -> dict:
    """One-sided sign test that values exceed ``threshold``."""
    vals = [v for v in values if v is not None and v != threshold]
    k = sum(v > threshold for v in vals)
    p = binomtest(k, len(vals), 0.5, alternative="greater").pvalue if vals else 1.0
    return {"n": len(vals), "above": int(k), "p_value": float(p)}
