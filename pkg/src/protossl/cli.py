"""Command-line front end.

Every subcommand takes ``--config``, ``--seed`` and ``--out``.  ``--out`` is the
run root: each stage writes ``<out>/<stage>/`` and reads its inputs from the
sibling stage directories.  Exit codes: 0 success, 1 runtime failure, 2 invalid
configuration (including the assignment capacity rule), 3 missing input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import adapt, assign, evaluation
from . import config as config_mod
from .config import ConfigValidationError, PipelineConfig
from .datagen import Corpus, Dataset, nested_subsets
from .numcore import Rng, save_tensors
from .pipeline import csv_text, make_corpus, pretrain_model
from .protomodel import ProtoModel
from .ssl import CURVE_COLUMNS

log = logging.getLogger("protossl")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


class MissingInput(Exception):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = path


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# --- stage plumbing ---------------------------------------------------------

def _stage_dir(out: Path, stage: str) -> Path:
    d = out / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_meta(d: Path, cfg: PipelineConfig, stage: str, runtimes: dict | None = None):
    (d / "effective_config.json").write_text(config_mod.dumps(cfg))
    run = {"stage": stage, "seed": cfg.seed, "git_describe": git_describe()}
    (d / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    if runtimes is not None:
        # wall-clock is kept apart so the other artifacts stay byte-identical
        (d / "runtime.json").write_text(json.dumps(runtimes, indent=2, sort_keys=True) + "\n")


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(path)
    return path


def _load_corpus(out: Path) -> Corpus:
    root = out / "gen"
    for split in ("pretrain", "train", "val", "test"):
        _need(root / split / "manifest.json")
    return Corpus.load(root)


def _load_model(out: Path, stage: str) -> ProtoModel:
    path = out / stage / "model"
    _need(path / "manifest.json")
    return ProtoModel.load(path)


# --- subcommands ------------------------------------------------------------

def cmd_gen(cfg, out):
    d = _stage_dir(out, "gen")
    t0 = time.perf_counter()
    corpus = make_corpus(cfg)
    corpus.save(d, {"seed": cfg.seed})
    _write_meta(d, cfg, "gen", {"gen_s": time.perf_counter() - t0})


def cmd_pretrain(cfg, out):
    corpus = _load_corpus(out)
    d = _stage_dir(out, "pretrain")
    t0 = time.perf_counter()
    model, curve = pretrain_model(cfg, corpus)
    model.save(d / "model", {"seed": cfg.seed, "stage": "pretrain"})
    (d / "curve.csv").write_text(csv_text(curve, CURVE_COLUMNS))
    _write_meta(d, cfg, "pretrain", {"pretrain_s": time.perf_counter() - t0})


def cmd_assign(cfg, out):
    msg = cfg.capacity_error()
    if msg:
        raise ConfigValidationError("", msg)
    corpus = _load_corpus(out)
    model = _load_model(out, "pretrain")
    d = _stage_dir(out, "assign")
    rng = Rng(cfg.seed, "assign")
    assigned, asg, times = evaluation.lap_assign(model, corpus.train, cfg.assign.M, cfg, rng)
    assigned.save(d / "model", {"seed": cfg.seed, "stage": "assign"})
    report = asg.report(corpus.train.labels)
    (d / "assignment.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_meta(d, cfg, "assign", {"score_ms": 1e3 * times["score_s"],
                                   "solve_ms": 1e3 * times["solve_s"],
                                   "activations_ms": 1e3 * times["activations_s"]})


def cmd_finetune(cfg, out):
    corpus = _load_corpus(out)
    model = _load_model(out, "assign")
    d = _stage_dir(out, "finetune")
    t0 = time.perf_counter()
    tuned, curve = adapt.finetune(model, corpus.train, corpus.val, cfg.finetune,
                                  Rng(cfg.seed, "finetune"))
    tuned.save(d / "model", {"seed": cfg.seed, "stage": "finetune"})
    (d / "curve.csv").write_text(csv_text(curve, adapt.FINETUNE_COLUMNS))
    _write_meta(d, cfg, "finetune", {"finetune_s": time.perf_counter() - t0})


def cmd_project(cfg, out, source="assign", mode=None):
    mode = mode or cfg.project.mode
    corpus = _load_corpus(out)
    model = _load_model(out, source)
    d = _stage_dir(out, "project")
    t0 = time.perf_counter()
    rows = None if mode == "label_supervised" else np.arange(model.bank.K)
    grounded = adapt.project(model, corpus.train, mode, corpus.pretrain, rows=rows,
                             chunk=cfg.project.chunk)
    grounded.save(d / "model", {"seed": cfg.seed, "stage": "project", "mode": mode,
                                "source_stage": source})
    _write_meta(d, cfg, "project", {"project_s": time.perf_counter() - t0})


def cmd_probe(cfg, out):
    corpus = _load_corpus(out)
    model = _load_model(out, "project")
    d = _stage_dir(out, "probe")
    t0 = time.perf_counter()
    try:
        rows, labels, _ = adapt.slot_layout(model)
    except adapt.SlotError:
        rows, labels = np.arange(model.bank.K), None
    train, test = corpus.train, corpus.test
    clf = adapt.train_probe(adapt.slot_features(model, train.X, rows), train.Y, cfg.probe.C,
                            cfg.probe.tol, cfg.probe.max_iter, train.labels)
    S = clf.decision(adapt.slot_features(model, test.X, rows))
    save_tensors(d / "classifier", {"W": clf.W, "b": clf.b, "means": clf.means,
                                    "stds": clf.stds},
                 {"C": clf.C, "rows": [int(r) for r in rows], "iterations": clf.iterations},
                 dtype="f64")
    save_tensors(d / "test_scores", {"scores": S}, {"split": "test"}, dtype="f64")
    macro, per = evaluation.macro_auroc(S, test.Y)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "auroc"])
    for name, a in zip(test.labels, per):
        w.writerow([name, repr(a)])
    w.writerow(["macro", repr(macro)])
    (d / "probe.csv").write_text(buf.getvalue())
    if labels is not None:
        rep = adapt.coefficient_report(clf, labels)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "or_pos", "or_neg", "ratio"])
        for r in rep["labels"]:
            w.writerow([test.labels[r["label"]], repr(r["or_pos"]), repr(r["or_neg"]),
                        "" if r["ratio"] is None else repr(r["ratio"])])
        (d / "coefficients.csv").write_text(buf.getvalue())
    _write_meta(d, cfg, "probe", {"probe_s": time.perf_counter() - t0})


def cmd_eval(cfg, out):
    corpus = _load_corpus(out)
    model = _load_model(out, "pretrain")
    if cfg.gen.n_labels * cfg.assign.M > model.bank.K:
        raise ConfigValidationError("", cfg.capacity_error() or "capacity rule K >= L*M")
    d = _stage_dir(out, "eval")
    ctx = evaluation.SeedContext(cfg.seed, corpus, model, cfg)
    reports, failures = evaluation.run_matrix(ctx, cfg.eval.conditions, cfg.eval.sizes)
    (d / "results.csv").write_text(evaluation.reports_csv(reports))
    extras = [{"condition": r.condition, "size": r.size, "seed": r.seed, **r.extra}
              for r in reports]
    (d / "details.json").write_text(json.dumps(extras, indent=2, sort_keys=True) + "\n")
    (d / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    _write_meta(d, cfg, "eval", {f"{r.condition}/{r.size}": r.runtimes for r in reports})
    if failures:
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(cfg, out):
    b = cfg.bench
    if b.L * b.M > b.K:
        raise ConfigValidationError(
            "bench.M", f"capacity rule K >= L*M violated: L*M = {b.L * b.M} > K = {b.K}")
    d = _stage_dir(out, "bench")
    rows = evaluation.bench_assign(b.K, b.L, b.M, b.N, b.D, b.seeds, cfg.assign.pool,
                                   cfg.assign.balance)
    cols = ("seed", "K", "L", "M", "N", "D", "lap_objective", "pool_objective_q")
    (d / "bench.csv").write_text(csv_text(rows, cols))
    timing = [{k: r[k] for k in ("seed", "lap_s", "pool_s")} for r in rows]
    _write_meta(d, cfg, "bench-assign", {"replicates": timing})


def cmd_report(cfg, out, runs=()):
    roots = [out] + [Path(r) for r in runs]
    rows = []
    for root in roots:
        rows += evaluation.read_reports_csv(_need(root / "eval" / "results.csv").read_text())
    d = _stage_dir(out, "report")
    summary = evaluation.summarize(rows)
    summary["runs"] = [str(r) for r in roots]
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (d / "curves.tsv").write_text(evaluation.curves_tsv(summary))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "size", "n_seeds", "macro_auroc", "ci_lo", "ci_hi"])
    for c in summary["cells"]:
        w.writerow([c["condition"], c["size"], len(c["seeds"]), repr(c["macro_auroc"]),
                    repr(c["ci_lo"]), repr(c["ci_hi"])])
    (d / "report.csv").write_text(buf.getvalue())
    _write_meta(d, cfg, "report")


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "assign": cmd_assign,
    "finetune": cmd_finetune, "project": cmd_project, "probe": cmd_probe,
    "eval": cmd_eval, "bench-assign": cmd_bench, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="protossl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("runs/default"), help="run root")
        if name == "project":
            p.add_argument("--source", choices=("assign", "finetune"), default="assign",
                           help="stage whose model is projected")
            p.add_argument("--mode", choices=adapt.PROJECT_MODES,
                           help="projection mode (default: project.mode from the config)")
        if name == "report":
            p.add_argument("--runs", type=Path, nargs="*", default=[],
                           help="further run roots to aggregate (e.g. other seeds)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            cfg = config_mod.load(_need(args.config))
        else:
            cfg = PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        extra = {}
        if args.command == "project":
            extra = {"source": args.source, "mode": args.mode}
        elif args.command == "report":
            extra = {"runs": args.runs}
        code = COMMANDS[args.command](cfg, args.out, **extra)
        return EXIT_OK if code is None else code
    except ConfigValidationError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:                     # surface anything else as a plain failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
