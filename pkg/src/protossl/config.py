"""Pipeline configuration: one JSON document, strictly validated."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adapt import FinetuneConfig
from .assign import PoolConfig
from .datagen import GenConfig
from .ssl import SslConfig


class ConfigValidationError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass
class AssignConfig:
    M: int = 2
    balance: bool = True
    replicates: int = 8
    pool: PoolConfig = field(default_factory=PoolConfig)


@dataclass
class ProjectConfig:
    mode: str = "label_supervised"
    noproj: bool = False        # skip grounding the source bank before transfer
    chunk: int = 512


@dataclass
class ProbeConfig:
    C: float = 0.0005
    tol: float = 1e-8
    max_iter: int = 100


@dataclass
class EvalConfig:
    conditions: list = field(default_factory=lambda: [
        "protossl_probe", "protossl_tuned", "supproto_direct", "supproto_pretrained",
        "random_assign", "pit", "pip"])
    sizes: list = field(default_factory=lambda: [1024, 256, 64])
    resamples: int = 1000
    source_M: int = 4


@dataclass
class BenchConfig:
    K: int = 1000
    L: int = 12
    M: int = 14
    N: int = 10000
    D: int = 32
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class PipelineConfig:
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    pretrain: SslConfig = field(default_factory=SslConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    project: ProjectConfig = field(default_factory=ProjectConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> None:
        _wrap("gen", self.gen.validate)
        _wrap("pretrain", self.pretrain.validate)
        _wrap("finetune", self.finetune.validate)
        if self.assign.M < 1:
            raise ConfigValidationError("assign.M", "must be >= 1")
        if self.assign.replicates < 1:
            raise ConfigValidationError("assign.replicates", "must be >= 1")
        from .adapt import PROJECT_MODES
        if self.project.mode not in PROJECT_MODES:
            raise ConfigValidationError("project.mode", f"choose from {PROJECT_MODES}")
        if self.project.chunk < 1:
            raise ConfigValidationError("project.chunk", "must be >= 1")
        if self.probe.C <= 0:
            raise ConfigValidationError("probe.C", "must be > 0")
        if self.eval.resamples < 1:
            raise ConfigValidationError("eval.resamples", "must be >= 1")
        from .evaluation import CONDITIONS
        for i, c in enumerate(self.eval.conditions):
            if c not in CONDITIONS:
                raise ConfigValidationError(f"eval.conditions[{i}]",
                                            f"unknown condition {c!r}; choose from {CONDITIONS}")
        for i, s in enumerate(self.eval.sizes):
            if not isinstance(s, int) or not self.gen.n_labels <= s <= self.gen.n_train:
                raise ConfigValidationError(
                    f"eval.sizes[{i}]", f"must be an integer in [{self.gen.n_labels}, "
                    f"gen.n_train={self.gen.n_train}], got {s!r}")

    def capacity_error(self) -> str | None:
        L, M, K = self.gen.n_labels, self.assign.M, self.pretrain.K
        if L * M > K:
            return (f"assign.M: capacity rule K >= L*M violated: L*M = {L}*{M} = {L * M} "
                    f"> K = {K}")
        return None


def _wrap(path, fn):
    try:
        fn()
    except ConfigValidationError:
        raise
    except ValueError as exc:
        msg = str(exc)
        raise ConfigValidationError(path, msg) from None


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigValidationError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigValidationError(where, f"unknown key (allowed: {sorted(names)})")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        where = f"{path}.{f.name}" if path else f.name
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], where)
    return cls(**kwargs)


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(path, f"expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigValidationError(path, f"expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "")
    cfg.validate()
    return cfg


def load(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(str(path), f"invalid JSON: {exc}") from None
    return from_dict(data)


def to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: PipelineConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


SMOKE = Path(__file__).with_name("configs") / "smoke.json"
