"""Seeded stage helpers shared by the command line and the test-suite."""

from __future__ import annotations

import csv
import io

from .config import PipelineConfig
from .datagen import Corpus, generate
from .evaluation import SeedContext
from .numcore import Rng
from .protomodel import ProtoModel
from .ssl import pretrain


def make_corpus(cfg: PipelineConfig, seed: int | None = None) -> Corpus:
    seed = cfg.seed if seed is None else seed
    return generate(cfg.gen, Rng(seed, "gen"))


def init_model(cfg: PipelineConfig, seed: int | None = None) -> ProtoModel:
    seed = cfg.seed if seed is None else seed
    p = cfg.pretrain
    return ProtoModel.init(cfg.gen.channels, cfg.gen.window_spec, p.K, p.hidden, p.dim,
                           Rng(seed, "model"))


def pretrain_model(cfg: PipelineConfig, corpus: Corpus, seed: int | None = None):
    """``(best model, curve)`` for the given seed."""
    seed = cfg.seed if seed is None else seed
    return pretrain(corpus.pretrain, init_model(cfg, seed), cfg.pretrain, Rng(seed, "pretrain"))


def seed_context(cfg: PipelineConfig, seed: int) -> tuple[SeedContext, list]:
    """Generate and pretrain for one seed; returns the context and the SSL curve."""
    corpus = make_corpus(cfg, seed)
    model, curve = pretrain_model(cfg, corpus, seed)
    return SeedContext(seed, corpus, model, cfg), curve


def csv_text(rows: list[dict], columns) -> str:
    """CSV with floats written by ``repr`` so values round-trip exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()
