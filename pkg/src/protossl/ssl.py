"""Self-supervised pretraining of encoder, prototype bank and projection head.

The contrastive signal is NT-Xent over the projected prototype activations of
two views of the same latent instance; KoLeo keeps the bank spread out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datagen import Dataset
from .numcore import Rng, row_normalize
from .protomodel import ProtoModel, activation_graph

log = logging.getLogger(__name__)

KOLEO_FLOOR = 1e-8


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``last_good`` holds the last finite state."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class SslConfig:
    K: int = 1000
    hidden: int = 64
    dim: int = 32
    temperature: float = 0.1
    koleo_weight: float = 1.0
    batch_pairs: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_epochs: int = 10
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    val_fraction: float = 0.1

    def validate(self):
        if self.temperature <= 0:
            raise ValueError("pretrain.temperature must be > 0")
        if self.batch_pairs < 2:
            raise ValueError("pretrain.batch_pairs must be >= 2 (NT-Xent needs negatives)")
        if self.K < 2:
            raise ValueError("pretrain.K must be >= 2")
        if not 0 < self.val_fraction < 1:
            raise ValueError("pretrain.val_fraction must lie in (0, 1)")


def nt_xent(Z, tau: float) -> ad.Tensor:
    """NT-Xent over rows ordered as view pairs (0,1), (2,3), ...

    Mean over all ``2N`` anchors of ``-log softmax`` of the positive among the
    other ``2N - 1`` rows, with cosine similarity scaled by ``1/tau``.
    """
    Z = ad.const(Z)
    n2 = Z.shape[0]
    if n2 % 2 or n2 < 2:
        raise ValueError(f"nt_xent needs an even number of rows >= 2, got {n2}")
    zn = ad.row_l2_normalize(Z)
    S = ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)
    mask = np.zeros((n2, n2))
    np.fill_diagonal(mask, -np.inf)
    pos = np.zeros((n2, n2))
    idx = np.arange(n2)
    pos[idx, idx ^ 1] = 1.0
    lse = ad.logsumexp(ad.add(S, mask), axis=1)
    positive = ad.sum(ad.mul(S, pos), axis=1)
    return ad.mean(ad.sub(lse, positive))


def koleo(P) -> ad.Tensor:
    """``-(1/K) sum_k log max(min_{i!=k} ||p^_k - p^_i||, 1e-8)`` on unit rows."""
    P = ad.const(P)
    K = P.shape[0]
    if K < 2:
        raise ValueError("koleo needs at least two prototypes")
    pn = ad.row_l2_normalize(P)
    G = pn.value @ pn.value.T
    np.fill_diagonal(G, -np.inf)
    nn = np.argmax(G, axis=1)          # nearest neighbour, lowest index on ties
    diff = ad.sub(pn, ad.take_rows(pn, nn))
    d2 = ad.sum(ad.square(diff), axis=1)
    logs = ad.scale(ad.log(ad.clamp_min(d2, KOLEO_FLOOR ** 2)), 0.5)
    return ad.scale(ad.mean(logs), -1.0)


def min_prototype_distance(P: np.ndarray) -> float:
    """Smallest pairwise distance between normalised prototype rows."""
    pn = row_normalize(P)
    d2 = np.sum(pn * pn, 1)[:, None] + np.sum(pn * pn, 1)[None] - 2 * pn @ pn.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def _param_tensors(model: ProtoModel) -> dict[str, ad.Tensor]:
    return {k: ad.param(v, k) for k, v in model.tensors().items()}


def _write_back(model: ProtoModel, params: dict[str, np.ndarray]) -> None:
    for k in ("W1", "b1", "W2", "b2"):
        setattr(model.encoder, k, params["enc." + k])
        setattr(model.head, k, params["head." + k])
    model.bank.P = params["bank.P"]


def _pair_batch(X: np.ndarray, members: dict, groups) -> np.ndarray:
    rows = []
    for g in groups:
        a, b = members[g][:2]
        rows += [a, b]
    return X[rows]


def ssl_losses(model: ProtoModel, p: dict[str, ad.Tensor], Xb: np.ndarray, cfg: SslConfig):
    A = activation_graph(model.encoder, p, p["bank.P"], Xb, model.window)
    Z = model.head.graph(p, A)
    return nt_xent(Z, cfg.temperature), koleo(p["bank.P"])


def _eval_ntxent(model: ProtoModel, X, members, groups, cfg: SslConfig) -> float:
    p = {k: ad.const(v) for k, v in model.tensors().items()}
    total, count = 0.0, 0
    B = cfg.batch_pairs
    for s in range(0, len(groups), B):
        chunk = groups[s:s + B]
        if len(chunk) < 2:
            continue
        nt, _ = ssl_losses(model, p, _pair_batch(X, members, chunk), cfg)
        total += float(nt.value) * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def split_groups(corpus: Dataset, cfg: SslConfig, rng: Rng):
    members: dict[int, list[int]] = {}
    for i, g in enumerate(corpus.group_ids):
        members.setdefault(int(g), []).append(i)
    groups = sorted(g for g, m in members.items() if len(m) >= 2)
    if len(groups) < 3:
        raise ValueError("pretraining corpus needs at least 3 groups with two members")
    perm = rng.gen.permutation(len(groups))
    n_val = max(1, int(round(cfg.val_fraction * len(groups))))
    val = sorted(groups[i] for i in perm[:n_val])
    train = sorted(groups[i] for i in perm[n_val:])
    return members, train, val


def pretrain(corpus: Dataset, model: ProtoModel, cfg: SslConfig, rng: Rng):
    """Minimise NT-Xent + koleo_weight * KoLeo with AdamW.

    Returns ``(model, curve)``; ``curve`` has one dict per epoch (epoch 0 is the
    untrained state).  The best-validation parameters are kept.
    """
    cfg.validate()
    model = model.copy()
    members, train_g, val_g = split_groups(corpus, cfg, rng.child("holdout"))
    X = corpus.X
    lr = cfg.lr
    curve = []

    def record(epoch, tr_nt, tr_ko):
        val = _eval_ntxent(model, X, members, val_g, cfg)
        curve.append({"epoch": epoch, "train_ntxent": tr_nt, "train_koleo": tr_ko,
                      "val_ntxent": val, "lr": lr})
        return val

    p0 = {k: ad.const(v) for k, v in model.tensors().items()}
    init_ko = float(koleo(p0["bank.P"]).value)
    init_nt = _eval_ntxent(model, X, members, train_g, cfg)
    best = record(0, init_nt, init_ko)
    best_state = model.copy()
    bad_plateau = bad_stop = 0
    state = ad.AdamWState()
    order_rng = rng.child("order")
    B = cfg.batch_pairs
    for epoch in range(1, cfg.max_epochs + 1):
        perm = order_rng.gen.permutation(len(train_g))
        nt_sum = ko_sum = 0.0
        steps = 0
        for s in range(0, len(perm) - 1, B):
            chunk = [train_g[i] for i in perm[s:s + B]]
            if len(chunk) < 2:
                continue
            params = _param_tensors(model)
            nt, ko = ssl_losses(model, params, _pair_batch(X, members, chunk), cfg)
            loss = ad.add(nt, ad.scale(ko, cfg.koleo_weight))
            if not np.isfinite(loss.value):
                raise TrainingAborted(
                    f"non-finite pretraining loss at epoch {epoch}, step {steps}", best_state)
            ad.backward(loss)
            raw = {k: t.value for k, t in params.items()}
            try:
                ad.adamw_step(raw, {k: t.grad for k, t in params.items()}, state, lr,
                              cfg.weight_decay)
            except ad.NonFiniteGradient as exc:
                raise TrainingAborted(str(exc), best_state) from exc
            _write_back(model, raw)
            nt_sum += float(nt.value)
            ko_sum += float(ko.value)
            steps += 1
        val = record(epoch, nt_sum / max(steps, 1), ko_sum / max(steps, 1))
        log.info("pretrain epoch %d val_ntxent %.4f lr %.1e", epoch, val, lr)
        if val < best:
            best, bad_plateau, bad_stop = val, 0, 0
            best_state = model.copy()
        else:
            bad_plateau += 1
            bad_stop += 1
            if bad_plateau > cfg.plateau_patience:
                lr *= cfg.plateau_factor
                bad_plateau = 0
            if bad_stop >= cfg.early_stop_patience:
                break
    return best_state, curve


CURVE_COLUMNS = ("epoch", "train_ntxent", "train_koleo", "val_ntxent", "lr")
