"""Shared numerics: similarity kernels, z-scoring, seeded randomness and the
on-disk tensor format.

Matrices are plain float64 ``numpy.ndarray`` objects; nothing here mutates its
inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

EPS = 1e-8

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class DomainError(ValueError):
    """An operand is outside the domain of an operation."""


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"cosine_sim: shape mismatch {u.shape} vs {v.shape}")
    nu = float(np.sqrt(np.dot(u, u)))
    nv = float(np.sqrt(np.dot(v, v)))
    if nu == 0.0:
        raise DomainError("cosine_sim: operand u has zero norm")
    if nv == 0.0:
        raise DomainError("cosine_sim: operand v has zero norm")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def row_normalize(x: np.ndarray) -> np.ndarray:
    """Rows divided by their L2 norm, with the norm floored at ``EPS``."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norms, EPS)


def cosine_sim_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between rows of ``a`` and rows of ``b``."""
    return np.clip(matmul_rows(row_normalize(a), row_normalize(b).T), -1.0, 1.0)


def matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` whose row results do not depend on how many rows ``a`` has.

    BLAS takes a different (gemv) path for a single row, which rounds
    differently from the batched gemm path.  Padding to two rows keeps every
    row bit-identical to the batched computation.
    """
    if a.ndim == 2 and a.shape[0] == 1:
        return (np.vstack([a, a]) @ b)[:1]
    return a @ b


def zscore_fit_apply(train: np.ndarray, apply_to: np.ndarray):
    """Standardise ``apply_to`` column-wise with statistics of ``train``.

    Population std, floored at ``EPS``.  Returns ``(z, means, stds)``.
    """
    train = np.asarray(train, dtype=np.float64)
    apply_to = np.asarray(apply_to, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise DomainError("zscore_fit_apply: train must be a nonempty matrix")
    if apply_to.shape[1] != train.shape[1]:
        raise DomainError(
            f"zscore_fit_apply: column mismatch {apply_to.shape[1]} vs {train.shape[1]}"
        )
    means = train.mean(axis=0)
    stds = train.std(axis=0)
    return zscore_apply(apply_to, means, stds), means, stds


def zscore_apply(x: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - means) / np.maximum(stds, EPS)


def _stream_key(stream: str) -> int:
    return int.from_bytes(hashlib.sha256(stream.encode("utf-8")).digest()[:8], "little")


class Rng:
    """Seeded generator addressed by ``(seed, stream)``.

    Named substreams are independent of one another and of the order in which
    they are created, so adding a new consumer never perturbs existing ones.
    """

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = stream
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_stream_key(stream),))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    # thin pass-throughs used throughout the package
    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)


def seeded_shuffle(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise DomainError("seeded_shuffle: n must be >= 1")
    return rng.gen.permutation(n)


def seeded_choice(rng: Rng, n: int) -> int:
    if n < 1:
        raise DomainError("seeded_choice: n must be >= 1")
    return int(rng.gen.integers(0, n))


# --- tensor directory format -------------------------------------------------

MANIFEST = "manifest.json"
BLOB = "data.bin"


def save_tensors(
    path: str | os.PathLike,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
    dtype: str = "f32",
) -> Path:
    """Write ``tensors`` as one little-endian row-major blob plus a manifest.

    Tensors are written in name order so identical inputs give identical bytes.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported tensor dtype {dtype!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_DTYPES[dtype])
            raw = arr.tobytes(order="C")
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": dtype,
                 "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {"tensors": entries, "meta": dict(meta or {})}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Inverse of :func:`save_tensors`; arrays come back as float64."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = _DTYPES[e["dtype"]]
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(np.float64)
    return out, manifest["meta"]
