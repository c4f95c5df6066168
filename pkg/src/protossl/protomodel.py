"""Windowed MLP encoder, prototype bank, activations and the contrastive head."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import WindowSpec, flat_windows
from .numcore import EPS, Rng, load_tensors, matmul_rows, row_normalize, save_tensors


class DimensionError(ValueError):
    pass


def _he(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Encoder:
    """Two affine maps with a ReLU between, applied to one flattened window."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden: int, dim: int, rng: Rng) -> "Encoder":
        return cls(_he(rng, in_dim, hidden), np.zeros(hidden),
                   _he(rng, hidden, dim) / np.sqrt(2.0), np.zeros(dim))

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W2.shape[1]

    def params(self, prefix="enc.") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")}

    def __call__(self, xw: np.ndarray) -> np.ndarray:
        if xw.shape[-1] != self.in_dim:
            raise DimensionError(
                f"encoder expects windows of size {self.in_dim}, got {xw.shape[-1]}")
        h = np.maximum(matmul_rows(xw, self.W1) + self.b1, 0.0)
        return matmul_rows(h, self.W2) + self.b2

    def graph(self, p: dict[str, ad.Tensor], xw: np.ndarray, prefix="enc.") -> ad.Tensor:
        h = ad.relu(ad.add(ad.matmul(ad.const(xw), p[prefix + "W1"]), p[prefix + "b1"]))
        return ad.add(ad.matmul(h, p[prefix + "W2"]), p[prefix + "b2"])


@dataclass
class PrototypeBank:
    P: np.ndarray
    assigned: list = field(default_factory=list)   # (label, slot) or None per row
    source: list = field(default_factory=list)     # (dataset, sample, window) or None

    def __post_init__(self):
        K = len(self.P)
        if K < 1:
            raise DimensionError("prototype bank needs at least one prototype")
        if not self.assigned:
            self.assigned = [None] * K
        if not self.source:
            self.source = [None] * K

    @classmethod
    def init(cls, K: int, dim: int, rng: Rng) -> "PrototypeBank":
        # uniform on the unit sphere
        return cls(row_normalize(rng.normal(size=(K, dim))))

    @property
    def K(self) -> int:
        return len(self.P)

    def slot_rows(self) -> list[int]:
        """Bank rows of assigned prototypes ordered by (label, slot)."""
        rows = [k for k, a in enumerate(self.assigned) if a is not None]
        return sorted(rows, key=lambda k: tuple(self.assigned[k]))


@dataclass
class ProjectionHead:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, K: int, rng: Rng) -> "ProjectionHead":
        out = max(K // 2, 1)
        return cls(_he(rng, K, K), np.zeros(K), _he(rng, K, out) / np.sqrt(2.0),
                   np.zeros(out))

    def params(self, prefix="head.") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")}

    def graph(self, p: dict[str, ad.Tensor], a: ad.Tensor, prefix="head.") -> ad.Tensor:
        if a.shape[-1] != p[prefix + "W1"].shape[0]:
            raise DimensionError(
                f"head expects {p[prefix + 'W1'].shape[0]} activations, got {a.shape[-1]}")
        h = ad.relu(ad.add(ad.matmul(a, p[prefix + "W1"]), p[prefix + "b1"]))
        return ad.add(ad.matmul(h, p[prefix + "W2"]), p[prefix + "b2"])


def head_forward(head: ProjectionHead, A: np.ndarray) -> np.ndarray:
    if A.shape[-1] != head.W1.shape[0]:
        raise DimensionError(f"head expects {head.W1.shape[0]} activations, got {A.shape[-1]}")
    h = np.maximum(matmul_rows(A, head.W1) + head.b1, 0.0)
    return matmul_rows(h, head.W2) + head.b2


def patch_embed(enc: Encoder, x: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Embeddings of every window of one ``(C, T)`` sample, ``(n_windows, D)``."""
    return embed_windows(enc, x[None], spec)[0]


def embed_windows(enc: Encoder, X: np.ndarray, spec: WindowSpec, chunk: int = 512):
    """Window embeddings for a batch ``(N, C, T)``, shape ``(N, n_windows, D)``."""
    N = len(X)
    n_w = spec.count(X.shape[-1])
    out = np.empty((N, n_w, enc.dim))
    for s in range(0, N, chunk):
        xw = flat_windows(X[s:s + chunk], spec)
        n = len(xw)
        out[s:s + n] = enc(xw.reshape(n * n_w, -1)).reshape(n, n_w, enc.dim)
    return out


def activations_from_embeddings(E: np.ndarray, P: np.ndarray, chunk: int = 256):
    """Max-over-window cosine similarity; returns ``(A, argmax_window)``."""
    N, n_w, D = E.shape
    if P.shape[1] != D:
        raise DimensionError(f"prototype dim {P.shape[1]} != embedding dim {D}")
    Pn = row_normalize(P)
    A = np.empty((N, len(P)))
    arg = np.empty((N, len(P)), dtype=np.int64)
    for s in range(0, N, chunk):
        e = row_normalize(E[s:s + chunk].reshape(-1, D))
        S = matmul_rows(e, Pn.T).reshape(-1, n_w, len(P))
        arg[s:s + len(S)] = np.argmax(S, axis=1)
        A[s:s + len(S)] = np.take_along_axis(S, arg[s:s + len(S)][:, None, :], axis=1)[:, 0]
    return np.clip(A, -1.0, 1.0), arg


def activations(enc: Encoder, P: np.ndarray, X: np.ndarray, spec: WindowSpec):
    """``A[n, k] = max_t cos(f(x_n,t), p_k)`` and the maximising window index."""
    if P.shape[1] != enc.dim:
        raise DimensionError(f"prototype dim {P.shape[1]} != encoder output {enc.dim}")
    return activations_from_embeddings(embed_windows(enc, X, spec), P)


def activation_graph(enc: Encoder, p: dict[str, ad.Tensor], P: ad.Tensor, X: np.ndarray,
                     spec: WindowSpec) -> ad.Tensor:
    """Differentiable activations ``(N, K)`` for a training batch."""
    N = len(X)
    xw = flat_windows(X, spec)
    n_w = xw.shape[1]
    e = enc.graph(p, xw.reshape(N * n_w, -1))
    S = ad.cosine_sim_matrix(e, P)
    return ad.rowwise_max(ad.reshape(S, (N, n_w, P.shape[0])), axis=1)


@dataclass
class ProtoModel:
    encoder: Encoder
    bank: PrototypeBank
    head: ProjectionHead
    window: WindowSpec

    @classmethod
    def init(cls, channels: int, window: WindowSpec, K: int, hidden: int, dim: int,
             rng: Rng) -> "ProtoModel":
        enc = Encoder.init(channels * window.width, hidden, dim, rng.child("encoder"))
        bank = PrototypeBank.init(K, dim, rng.child("bank"))
        head = ProjectionHead.init(K, rng.child("head"))
        return cls(enc, bank, head, window)

    def copy(self) -> "ProtoModel":
        return copy.deepcopy(self)

    def activations(self, X: np.ndarray, P: np.ndarray | None = None):
        return activations(self.encoder, self.bank.P if P is None else P, X, self.window)

    def tensors(self) -> dict[str, np.ndarray]:
        t = {}
        t.update(self.encoder.params())
        t.update(self.head.params())
        t["bank.P"] = self.bank.P
        return t

    def save(self, path, meta=None) -> Path:
        m = {
            "window": {"width": self.window.width, "stride": self.window.stride},
            "assigned": [None if a is None else list(a) for a in self.bank.assigned],
            "source": [None if s is None else list(s) for s in self.bank.source],
        }
        m.update(meta or {})
        return save_tensors(path, self.tensors(), m, dtype="f64")

    @classmethod
    def load(cls, path) -> "ProtoModel":
        t, m = load_tensors(path)
        enc = Encoder(t["enc.W1"], t["enc.b1"], t["enc.W2"], t["enc.b2"])
        head = ProjectionHead(t["head.W1"], t["head.b1"], t["head.W2"], t["head.b2"])
        bank = PrototypeBank(
            t["bank.P"],
            [None if a is None else tuple(a) for a in m["assigned"]],
            [None if s is None else tuple(s) for s in m["source"]],
        )
        return cls(enc, bank, head, WindowSpec(**m["window"]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.bank.assigned, self.bank.source)).encode())
        return h.hexdigest()


__all__ = [
    "EPS", "Encoder", "PrototypeBank", "ProjectionHead", "ProtoModel", "DimensionError",
    "head_forward", "patch_embed", "embed_windows", "activations",
    "activations_from_embeddings", "activation_graph",
]
