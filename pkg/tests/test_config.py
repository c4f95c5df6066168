import json

import pytest

from protossl import config as C


def test_defaults_roundtrip():
    cfg = C.PipelineConfig()
    cfg.validate()
    back = C.from_dict(json.loads(C.dumps(cfg)))
    assert C.dumps(back) == C.dumps(cfg)


def test_defaults_echo_published_hyperparameters():
    d = C.to_dict(C.PipelineConfig())
    assert d["pretrain"]["K"] == 1000
    assert (d["pretrain"]["lr"], d["pretrain"]["weight_decay"]) == (1e-3, 0.01)
    assert d["probe"]["C"] == 0.0005 and d["probe"]["max_iter"] == 100
    assert d["eval"]["resamples"] == 1000
    w = d["finetune"]["weights"]
    assert (w["clst"], w["sep"], w["div"], w["cntrst"]) == (0.004, 0.0004, 250, 300)
    assert set(d) >= {"gen", "pretrain", "assign", "finetune", "project", "probe", "eval",
                      "bench", "seed"}


@pytest.mark.parametrize("data, path", [
    ({"gen": {"chanels": 3}}, "gen.chanels"),
    ({"assign": {"pool": {"epochs": "x"}}}, "assign.pool.epochs"),
    ({"finetune": {"weights": {"div": -1}}}, "finetune"),
    ({"eval": {"conditions": ["nope"]}}, "eval.conditions[0]"),
    ({"eval": {"sizes": [5000]}}, "eval.sizes[0]"),
    ({"project": {"mode": "nearest"}}, "project.mode"),
    ({"project": {"mode": 3}}, "project.mode"),
    ({"pretrain": {"temperature": 0}}, "pretrain"),
    ({"bogus": 1}, "bogus"),
])
def test_validation_reports_field_path(data, path):
    with pytest.raises(C.ConfigValidationError) as e:
        C.from_dict(data)
    assert e.value.path == path


def test_bool_and_int_are_distinct():
    with pytest.raises(C.ConfigValidationError):
        C.from_dict({"assign": {"balance": 1}})
    with pytest.raises(C.ConfigValidationError):
        C.from_dict({"seed": True})
    assert C.from_dict({"probe": {"C": 1}}).probe.C == 1.0


def test_capacity_rule():
    cfg = C.from_dict({"pretrain": {"K": 10}, "assign": {"M": 2}})
    assert "K = 10" in cfg.capacity_error() and "6*2 = 12" in cfg.capacity_error()
    assert C.PipelineConfig().capacity_error() is None


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(C.ConfigValidationError):
        C.load(p)


def test_smoke_config_loads():
    cfg = C.load(C.SMOKE)
    assert cfg.pretrain.K * 1 >= cfg.gen.n_labels * cfg.assign.M
