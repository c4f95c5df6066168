"""Synthetic planted-motif multilabel time series.

A motif library holds short multichannel waveforms.  Every target label owns
``variants_per_label`` motifs; one extra confounder motif belongs to the last
two labels at once, which makes those labels co-occur.  A disjoint set of
source motifs defines the labels of a separate source task and appears in the
target data only as an unlabeled distractor (and vice versa).

Each sample is Gaussian background noise plus 1..3 non-overlapping motif
instances.  Pretraining samples come in groups of two views that share the
motif placement and amplitudes but draw independent noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Rng, load_tensors, save_tensors


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    width: int = 20
    stride: int = 10

    def validate(self, length: int) -> None:
        if self.width < 1 or self.stride < 1:
            raise ConfigError("window width and stride must be positive")
        if self.stride > self.width:
            raise ConfigError(f"window stride {self.stride} exceeds width {self.width}")
        if self.width > length:
            raise ConfigError(f"window width {self.width} exceeds series length {length}")
        if (length - self.width) % self.stride:
            raise ConfigError(
                f"(T - W) = {length - self.width} is not divisible by stride {self.stride}")

    def count(self, length: int) -> int:
        self.validate(length)
        return (length - self.width) // self.stride + 1


def windows(x: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Slices of a ``(C, T)`` sample, shape ``(n_windows, C, W)``."""
    n = spec.count(x.shape[-1])
    return np.stack([x[:, t * spec.stride: t * spec.stride + spec.width] for t in range(n)])


def flat_windows(X: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Windows of a batch ``(N, C, T)`` flattened to ``(N, n_windows, C*W)``.

    Flattening is channel-major, matching ``windows(x)[t].ravel()``.
    """
    N, C, T = X.shape
    n = spec.count(T)
    view = np.lib.stride_tricks.sliding_window_view(X, spec.width, axis=2)
    view = view[:, :, :: spec.stride][:, :, :n]          # (N, C, n, W)
    return np.ascontiguousarray(view.transpose(0, 2, 1, 3)).reshape(N, n, C * spec.width)


@dataclass
class GenConfig:
    channels: int = 3
    length: int = 200
    n_labels: int = 6
    variants_per_label: int = 2
    confounder: bool = True
    n_source_labels: int = 4
    motif_width: int = 15
    window: int = 20
    stride: int = 10
    noise: float = 0.3
    amp_low: float = 0.8
    amp_high: float = 1.25
    onset_jitter: int = 5
    min_motifs: int = 1
    max_motifs: int = 3
    n_pretrain_groups: int = 8192
    n_train: int = 1024
    n_val: int = 256
    n_test: int = 1024
    n_source_train: int = 1024
    n_source_val: int = 256

    @property
    def grid_separation(self) -> int:
        """Minimum spacing, in grid steps, between motif onsets before jitter."""
        return max(1, -(-(self.motif_width + 2 * self.onset_jitter) // self.stride))

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.window, self.stride)

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError("gen.channels must be >= 1")
        if self.n_labels < 1 or self.variants_per_label < 1:
            raise ConfigError("gen.n_labels and gen.variants_per_label must be >= 1")
        self.window_spec.validate(self.length)
        if self.motif_width > self.length:
            raise ConfigError("gen.motif_width exceeds gen.length")
        if not 1 <= self.min_motifs <= self.max_motifs:
            raise ConfigError("need 1 <= gen.min_motifs <= gen.max_motifs")
        n_grid = (self.length - self.motif_width) // self.stride + 1
        if (self.max_motifs - 1) * self.grid_separation + 1 > n_grid:
            raise ConfigError(
                f"cannot place {self.max_motifs} motifs of width {self.motif_width} "
                f"with onset jitter {self.onset_jitter} without overlap in length "
                f"{self.length}")
        if self.noise < 0 or not 0 < self.amp_low <= self.amp_high:
            raise ConfigError("gen.noise must be >= 0 and 0 < gen.amp_low <= gen.amp_high")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < self.n_labels:
                raise ConfigError(f"gen.{name} must be >= gen.n_labels ({self.n_labels})")
        if self.n_source_labels:
            for name in ("n_source_train", "n_source_val"):
                if getattr(self, name) < self.n_source_labels:
                    raise ConfigError(f"gen.{name} must be >= gen.n_source_labels")
        if self.n_pretrain_groups < 2:
            raise ConfigError("gen.n_pretrain_groups must be >= 2")


@dataclass
class MotifLibrary:
    templates: np.ndarray                  # (n_motifs, C, W_m), unit peak amplitude
    target_labels: list[list[int]]          # target labels carried by each motif
    source_labels: list[list[int]]          # source labels carried by each motif
    n_labels: int
    n_source_labels: int

    @property
    def n_motifs(self) -> int:
        return len(self.templates)


def _smooth_template(rng: Rng, channels: int, width: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, width)
    out = np.zeros((channels, width))
    for c in range(channels):
        for _ in range(2):
            mu = rng.uniform(0.1, 0.9)
            sd = rng.uniform(0.08, 0.25)
            out[c] += rng.normal() * np.exp(-0.5 * ((t - mu) / sd) ** 2)
        out[c] += 0.5 * rng.normal() * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t
                                              + rng.uniform(0, 2 * np.pi))
    return out / np.max(np.abs(out))


def build_library(cfg: GenConfig, rng: Rng) -> MotifLibrary:
    target, source = [], []
    for label in range(cfg.n_labels):
        for _ in range(cfg.variants_per_label):
            target.append([label])
            source.append([])
    if cfg.confounder and cfg.n_labels >= 2:
        target.append([cfg.n_labels - 2, cfg.n_labels - 1])
        source.append([])
    for label in range(cfg.n_source_labels):
        for _ in range(cfg.variants_per_label):
            target.append([])
            source.append([label])
    templates = []
    flat_prev = []
    while len(templates) < len(target):
        cand = _smooth_template(rng, cfg.channels, cfg.motif_width)
        f = cand.ravel() / np.linalg.norm(cand)
        # keep motifs mutually distinguishable
        if all(abs(float(f @ g)) < 0.6 for g in flat_prev):
            templates.append(cand)
            flat_prev.append(f)
    return MotifLibrary(np.stack(templates), target, source, cfg.n_labels, cfg.n_source_labels)


@dataclass
class Dataset:
    X: np.ndarray                          # (N, C, T)
    Y: np.ndarray | None                   # (N, L) binary, None for unlabeled corpora
    group_ids: np.ndarray                  # (N,)
    split: str
    labels: list[str]
    placements: list[list[list[float]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], None if self.Y is None else self.Y[idx],
                       self.group_ids[idx], self.split, list(self.labels),
                       [self.placements[i] for i in idx] if self.placements else [])

    def save(self, path, meta=None) -> Path:
        tensors = {"X": self.X}
        if self.Y is not None:
            tensors["Y"] = self.Y
        m = {"split": self.split, "labels": list(self.labels),
             "group_ids": [int(g) for g in self.group_ids],
             "placements": self.placements}
        m.update(meta or {})
        return save_tensors(path, tensors, m, dtype="f32")

    @classmethod
    def load(cls, path) -> "Dataset":
        t, m = load_tensors(path)
        return cls(t["X"], t.get("Y"), np.asarray(m["group_ids"], dtype=np.int64),
                   m["split"], list(m["labels"]), m.get("placements", []))


@dataclass
class Corpus:
    pretrain: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    source_train: Dataset | None = None
    source_val: Dataset | None = None

    SPLITS = ("pretrain", "train", "val", "test", "source_train", "source_val")

    def save(self, root, meta=None) -> Path:
        root = Path(root)
        for name in self.SPLITS:
            ds = getattr(self, name)
            if ds is not None:
                ds.save(root / name, meta)
        return root

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        parts = {}
        for name in cls.SPLITS:
            p = root / name
            parts[name] = Dataset.load(p) if (p / "manifest.json").exists() else None
        return cls(**parts)


def _f32(x: np.ndarray) -> np.ndarray:
    # stored precision is float32; keep in-memory data identical to a reload
    return x.astype(np.float32).astype(np.float64)


class _Sampler:
    def __init__(self, cfg: GenConfig, lib: MotifLibrary, rng: Rng):
        self.cfg, self.lib, self.rng = cfg, lib, rng

    def placement(self, forced: int | None = None):
        """Draw (motif, grid onset) pairs; ``forced`` motif is included.

        Grid onsets are spaced so that any later onset jitter cannot make two
        motifs overlap.
        """
        cfg, rng = self.cfg, self.rng
        n = int(rng.integers(cfg.min_motifs, cfg.max_motifs + 1))
        motifs = list(rng.gen.choice(self.lib.n_motifs, size=n, replace=False))
        if forced is not None and forced not in motifs:
            motifs[0] = forced
        grid = np.arange(0, cfg.length - cfg.motif_width + 1, cfg.stride)
        sep = cfg.grid_separation
        for _ in range(1000):
            cells = np.sort(rng.gen.choice(len(grid), size=n, replace=False))
            if np.all(np.diff(cells) >= sep):
                break
        else:
            raise ConfigError("could not place motifs without overlap; "
                              "reduce gen.max_motifs or gen.onset_jitter")
        order = rng.gen.permutation(n)
        return [(int(motifs[i]), int(grid[cells[j]])) for j, i in enumerate(order)]

    def instantiate(self, placement):
        """Per-view onset jitter and amplitude: ``[(motif, onset, amplitude)]``."""
        cfg, rng = self.cfg, self.rng
        span = cfg.length - cfg.motif_width
        out = []
        for m, g in placement:
            onset = g + int(rng.integers(-cfg.onset_jitter, cfg.onset_jitter + 1))
            onset = min(max(onset, 0), span)
            out.append((m, onset, float(rng.uniform(cfg.amp_low, cfg.amp_high))))
        return out

    def render(self, placement) -> np.ndarray:
        cfg = self.cfg
        x = cfg.noise * self.rng.normal(size=(cfg.channels, cfg.length))
        for m, onset, amp in placement:
            x[:, onset: onset + cfg.motif_width] += amp * self.lib.templates[m]
        return x


def _labelled_split(sampler: _Sampler, n: int, split: str, label_map, n_labels: int,
                    first_gid: int, names: list[str]) -> Dataset:
    lib = sampler.lib
    # motif variants that carry exactly one label, used to guarantee coverage
    owners = {l: [m for m in range(lib.n_motifs) if label_map[m] == [l]]
              for l in range(n_labels)}
    X = np.zeros((n, sampler.cfg.channels, sampler.cfg.length))
    Y = np.zeros((n, n_labels))
    placements = []
    for i in range(n):
        forced = None
        if i < n_labels:
            forced = int(sampler.rng.gen.choice(owners[i]))
        pl = sampler.instantiate(sampler.placement(forced))
        X[i] = sampler.render(pl)
        for m, _, _ in pl:
            Y[i, label_map[m]] = 1.0
        placements.append([[m, o, a] for m, o, a in pl])
    gids = np.arange(first_gid, first_gid + n, dtype=np.int64)
    return Dataset(_f32(X), Y, gids, split, names, placements)


def generate(cfg: GenConfig, rng: Rng) -> Corpus:
    """Build the unlabeled pretraining corpus and the labeled target/source splits."""
    cfg.validate()
    lib = build_library(cfg, rng.child("library"))
    names = [f"label{l}" for l in range(cfg.n_labels)]

    s = _Sampler(cfg, lib, rng.child("pretrain"))
    G = cfg.n_pretrain_groups
    X = np.zeros((2 * G, cfg.channels, cfg.length))
    placements = []
    for g in range(G):
        # both views share motifs, onsets and amplitudes; only the noise differs
        inst = s.instantiate(s.placement())
        X[2 * g] = s.render(inst)
        X[2 * g + 1] = s.render(inst)
        placements += [[[m, o, a] for m, o, a in inst]] * 2
    pretrain = Dataset(_f32(X), None, np.repeat(np.arange(G, dtype=np.int64), 2),
                       "pretrain", [], placements)

    gid = G
    parts = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        parts[split] = _labelled_split(_Sampler(cfg, lib, rng.child(split)), n, split,
                                       lib.target_labels, cfg.n_labels, gid, names)
        gid += n
    if cfg.n_source_labels:
        snames = [f"source{l}" for l in range(cfg.n_source_labels)]
        for split, n in (("source_train", cfg.n_source_train),
                         ("source_val", cfg.n_source_val)):
            parts[split] = _labelled_split(_Sampler(cfg, lib, rng.child(split)), n, split,
                                           lib.source_labels, cfg.n_source_labels, gid,
                                           snames)
            gid += n
    return Corpus(pretrain=pretrain, **parts)


def library_of(cfg: GenConfig, rng: Rng) -> MotifLibrary:
    """Rebuild the motif library used by ``generate(cfg, rng)``."""
    return build_library(cfg, rng.child("library"))


# --- nested stratified subsets ----------------------------------------------

def _stratified_pick(Y: np.ndarray, size: int, rng: Rng) -> np.ndarray:
    """Greedy iterative stratification choosing ``size`` of ``len(Y)`` rows.

    Returns a boolean mask over the rows.
    """
    n, L = Y.shape
    frac = size / n
    want_in = Y.sum(axis=0) * frac
    want_out = Y.sum(axis=0) * (1.0 - frac)
    cap_in, cap_out = float(size), float(n - size)
    chosen = np.zeros(n, dtype=bool)
    pending = np.ones(n, dtype=bool)
    order = rng.gen.permutation(n)
    while True:
        remaining = (Y[pending] > 0).sum(axis=0)
        live = np.flatnonzero(remaining > 0)
        if live.size == 0:
            break
        label = live[np.argmin(remaining[live])]
        for i in order:
            if not pending[i] or Y[i, label] == 0:
                continue
            d_in, d_out = want_in[label], want_out[label]
            if cap_in <= 0:
                take = False
            elif cap_out <= 0:
                take = True
            elif d_in != d_out:
                take = d_in > d_out
            else:
                take = cap_in >= cap_out
            pending[i] = False
            if take:
                chosen[i] = True
                want_in -= Y[i]
                cap_in -= 1
            else:
                want_out -= Y[i]
                cap_out -= 1
    rest = [i for i in order if pending[i]]
    for i in rest:
        if cap_in > 0:
            chosen[i] = True
            cap_in -= 1
    # exact size: trim or top up at random
    diff = int(chosen.sum()) - size
    if diff > 0:
        drop = [i for i in order if chosen[i]][:diff]
        chosen[drop] = False
    elif diff < 0:
        add = [i for i in order if not chosen[i]][: -diff]
        chosen[add] = True
    return chosen


def nested_subsets(train: Dataset, sizes, rng: Rng) -> list[np.ndarray]:
    """Nested, approximately label-stratified index sets, largest first.

    Every label keeps at least one positive in every subset: a missing label is
    repaired by swapping one of its positives from the parent set in for a
    member whose removal does not strip another label.
    """
    Y = train.Y
    if Y is None:
        raise ConfigError("nested_subsets needs a labeled dataset")
    sizes = [int(s) for s in sizes]
    if any(a < b for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"subset sizes must be descending, got {sizes}")
    L = Y.shape[1]
    if not sizes or sizes[-1] < L:
        raise ConfigError(f"smallest subset size must be >= number of labels ({L})")
    if sizes[0] > len(train):
        raise ConfigError(f"subset size {sizes[0]} exceeds training size {len(train)}")
    parent = np.arange(len(train))
    out = []
    for k, size in enumerate(sizes):
        sub_rng = rng.child(f"subset{k}")
        if size == len(parent):
            idx = parent.copy()
        else:
            mask = _stratified_pick(Y[parent], size, sub_rng)
            idx = parent[mask]
            idx = _inject_missing(Y, idx, parent, sub_rng)
        idx = np.sort(idx)
        out.append(idx)
        parent = idx
    return out


def _inject_missing(Y, idx, parent, rng: Rng) -> np.ndarray:
    idx = list(idx)
    for label in range(Y.shape[1]):
        if Y[idx, label].sum() > 0:
            continue
        members = set(idx)
        pool = [i for i in parent if Y[i, label] > 0 and i not in members]
        newcomer = int(pool[int(rng.integers(0, len(pool)))])
        counts = Y[idx].sum(axis=0)
        # drop a member whose labels all stay covered without it
        removable = [j for j, i in enumerate(idx)
                     if np.all(counts[Y[i] > 0] > 1)] or list(range(len(idx)))
        j = removable[int(rng.integers(0, len(removable)))]
        idx[j] = newcomer
    return np.asarray(idx, dtype=np.intp)


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
