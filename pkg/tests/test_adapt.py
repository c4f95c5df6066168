import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from protossl import adapt
from protossl import autodiff as ad
from protossl.assign import apply, random_assignment
from protossl.datagen import Dataset, GenConfig, generate
from protossl.evaluation import auroc
from protossl.numcore import Rng
from protossl.protomodel import ProtoModel, embed_windows
from protossl.ssl import TrainingAborted
from tests.oracles import logistic_objective


def _corpus(seed=0, n_train=48):
    cfg = GenConfig(n_pretrain_groups=8, n_train=n_train, n_val=24, n_test=24,
                    n_source_train=8, n_source_val=8)
    return generate(cfg, Rng(seed, "gen"))


def _model(L=6, M=2, K=20, seed=0):
    m = ProtoModel.init(3, GenConfig().window_spec, K, 16, 8, Rng(seed, "m"))
    m.bank = apply(m.bank, random_assignment(K, L, M, Rng(seed, "a")))
    return m


# --- supervised losses --------------------------------------------------------

def test_clst_zero_for_perfect_match():
    A = ad.const(np.array([[1.0, 0.2, -0.3, 0.1]]))      # L=2, M=2
    Y = np.array([[1.0, 0.0]])
    assert float(adapt.clst_loss(A, Y, 2).value) == 0.0


def test_sep_hinge():
    A = ad.const(np.array([[0.9, 0.1, -0.3, -0.1]]))
    Y = np.array([[1.0, 0.0]])
    assert float(adapt.sep_loss(A, Y, 2).value) == 0.0
    A = ad.const(np.array([[0.9, 0.1, -0.3, 0.4]]))
    assert float(adapt.sep_loss(A, Y, 2).value) == pytest.approx(0.4)


def test_div_orthogonal_is_zero_and_close_pairs_penalised():
    labels = np.array([0, 0, 1, 1])
    P = np.eye(4)
    assert float(adapt.div_loss(ad.const(P), labels).value) == 0.0
    P[1] = [1.0, 0.1, 0, 0]
    c = 1 / math.sqrt(1.01)
    assert float(adapt.div_loss(ad.const(P), labels).value) == pytest.approx((c - 0.3) ** 2 / 2)


def test_cntrst_prefers_cooccurring_labels_close():
    labels = np.array([0, 1])
    Y = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    near = adapt.cntrst_loss(ad.const(np.array([[1.0, 0.0], [1.0, 0.1]])), labels, Y)
    far = adapt.cntrst_loss(ad.const(np.array([[1.0, 0.0], [-1.0, 0.1]])), labels, Y)
    assert float(near.value) < float(far.value)
    # labels that never co-occur contribute nothing
    Y0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert float(adapt.cntrst_loss(ad.const(np.eye(2)), labels, Y0).value) == 0.0


def _sup_inputs(seed=0):
    c = _corpus(seed)
    m = _model()
    rows, labels, M = adapt.slot_layout(m)
    raw = adapt._ft_params(m, rows, 6, M)
    rng = np.random.default_rng(seed)
    raw["cls.W"] = rng.normal(size=raw["cls.W"].shape)
    p = {k: ad.const(v) for k, v in raw.items()}
    return m, p, c.train.X[:8], c.train.Y[:8], labels, M


def test_zero_weights_reduce_to_ce():
    m, p, X, Y, labels, M = _sup_inputs()
    total, parts = adapt.sup_losses(m, p, X, Y, labels, M, adapt.SupLossWeights(0, 0, 0, 0))
    assert float(total.value) == float(parts["ce"].value)
    total, parts = adapt.sup_losses(m, p, X, Y, labels, M, adapt.SupLossWeights())
    expect = float(parts["ce"].value) + sum(
        getattr(adapt.SupLossWeights(), k) * float(parts[k].value)
        for k in ("clst", "sep", "div", "cntrst"))
    assert float(total.value) == pytest.approx(expect, rel=1e-12)


def test_sup_losses_gradient_end_to_end():
    from tests.oracles import central_difference, rel_error
    m, p, X, Y, labels, M = _sup_inputs(1)
    w = adapt.SupLossWeights(0.5, 0.5, 2.0, 1.0)
    raw = {k: t.value.copy() for k, t in p.items()}
    params = {k: ad.param(v.copy(), k) for k, v in raw.items()}
    ad.backward(adapt.sup_losses(m, params, X[:3], Y[:3], labels, M, w)[0])
    for name in ("slots.P", "cls.W", "enc.b2"):
        x = raw[name]

        def f():
            q = {k: ad.const(v) for k, v in raw.items()}
            return float(adapt.sup_losses(m, q, X[:3], Y[:3], labels, M, w)[0].value)
        assert rel_error(params[name].grad, central_difference(f, x)) <= 1e-4


def test_unassigned_slots_rejected():
    m = ProtoModel.init(3, GenConfig().window_spec, 8, 8, 4, Rng(0))
    with pytest.raises(adapt.SlotError):
        adapt.slot_layout(m)


# --- fine-tuning ----------------------------------------------------------------

def test_finetune_zero_epochs_unchanged():
    c, m = _corpus(), _model()
    out, curve = adapt.finetune(m, c.train, c.val, adapt.FinetuneConfig(max_epochs=0), Rng(0))
    assert out.digest() == m.digest() and len(curve) == 1


def test_finetune_touches_only_encoder_and_slots():
    c, m = _corpus(), _model()
    out, _ = adapt.finetune(m, c.train, c.val,
                            adapt.FinetuneConfig(max_epochs=2, batch_size=16, lr=1e-2), Rng(0))
    rows = set(adapt.slot_layout(m)[0].tolist())
    free = [k for k in range(m.bank.K) if k not in rows]
    assert np.array_equal(out.bank.P[free], m.bank.P[free])
    assert np.array_equal(out.head.W1, m.head.W1)
    assert not np.array_equal(out.encoder.W1, m.encoder.W1)


def test_finetune_head_starts_at_probe_decision():
    c, m = _corpus(), _model()
    rows = adapt.slot_layout(m)[0]
    A = adapt.slot_features(m, c.train.X, rows)
    clf = adapt.train_probe(A, c.train.Y, C=1.0)
    W, b = adapt._head_init(m, rows, c.train, 1.0)
    assert np.allclose(A @ W + b, clf.decision(A), atol=1e-9)


def test_finetune_finite_for_50_epochs_with_default_weights():
    c = _corpus(2, n_train=32)
    cfg = adapt.FinetuneConfig(max_epochs=50, batch_size=32, early_stop_patience=1000)
    out, curve = adapt.finetune(_model(), c.train, c.val, cfg, Rng(0))
    assert len(curve) == 51
    assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["val_loss"]) for r in curve)
    assert all(np.all(np.isfinite(v)) for v in out.tensors().values())


def test_finetune_abort_on_nan(monkeypatch):
    c, m = _corpus(), _model()

    def boom(*a, **k):
        t = ad.const(np.array(np.nan))
        return t, {}
    monkeypatch.setattr(adapt, "sup_losses", boom)
    with pytest.raises(TrainingAborted):
        adapt.finetune(m, c.train, c.val, adapt.FinetuneConfig(max_epochs=1), Rng(0))


# --- projection ----------------------------------------------------------------

def test_projection_grounding_and_optimality():
    c, m = _corpus(3), _model()
    out = adapt.project(m, c.train, "label_supervised")
    E = embed_windows(m.encoder, c.train.X, m.window)
    for k in adapt.slot_layout(m)[0]:
        l = m.bank.assigned[k][0]
        tag, n, t = out.bank.source[k]
        assert tag == "train" and c.train.Y[n, l] == 1
        assert np.array_equal(out.bank.P[k], E[n, t])
        p = m.bank.P[k] / np.linalg.norm(m.bank.P[k])
        sims = (E / np.linalg.norm(E, axis=2, keepdims=True)) @ p
        sims[c.train.Y[:, l] == 0] = -np.inf
        assert not np.any(sims > sims[n, t])
        acts = adapt.slot_features(out, c.train.X[n:n + 1], [k])
        assert acts[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_projection_chunking_is_invisible():
    c, m = _corpus(4), _model()
    a = adapt.project(m, c.train, "label_supervised", chunk=512)
    b = adapt.project(m, c.train, "label_supervised", chunk=5)
    assert a.digest() == b.digest()


def test_single_positive_single_window():
    m = ProtoModel.init(1, GenConfig(window=20, stride=10).window_spec, 2, 4, 3, Rng(0))
    m.bank.assigned = [(0, 0), None]
    X = np.random.default_rng(0).normal(size=(3, 1, 20))
    ds = Dataset(X, np.array([[0.0], [1.0], [0.0]]), np.arange(3), "train", ["a"])
    out = adapt.project(m, ds)
    assert np.array_equal(out.bank.P[0], embed_windows(m.encoder, X[1:2], m.window)[0, 0])
    assert out.bank.source[0] == ("train", 1, 0)


def test_pit_ignores_labels_and_pip_uses_pretrain():
    c, m = _corpus(5), _model()
    rows = np.arange(m.bank.K)
    a = adapt.project(m, c.train, "pit", rows=rows)
    unl = Dataset(c.train.X, None, c.train.group_ids, "train", [])
    b = adapt.project(m, unl, "pit", rows=rows)
    assert a.digest() == b.digest()
    p = adapt.project(m, c.train, "pip", c.pretrain, rows=rows)
    assert all(s[0] == "pretrain" for s in p.bank.source)
    with pytest.raises(ValueError):
        adapt.project(m, c.train, "pip", None, rows=rows)


def test_projection_missing_positive_names_label():
    c, m = _corpus(6), _model()
    c.train.Y[:, 2] = 0
    with pytest.raises(ValueError, match="label2"):
        adapt.project(m, c.train, "label_supervised")


# --- probe ---------------------------------------------------------------------

def test_probe_separable_auroc_one():
    x = np.concatenate([np.linspace(-2, -0.5, 10), np.linspace(0.5, 2, 10)])[:, None]
    y = (x[:, 0] > 0).astype(float)[:, None]
    clf = adapt.train_probe(x, y)
    assert auroc(clf.decision(x)[:, 0], y[:, 0]) == 1.0


def test_probe_symmetric_bias_zero():
    a = 0.7
    x = np.array([[a]] * 5 + [[-a]] * 5)
    y = np.array([[1.0]] * 5 + [[0.0]] * 5)
    clf = adapt.train_probe(x, y, C=1e6)
    assert abs(clf.b[0]) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 10.0))
def test_probe_norm_monotone_in_c(seed, C):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    y = (X @ rng.normal(size=3) + rng.normal(size=40) > 0).astype(float)
    y[:2] = [0, 1]
    w1 = adapt.train_probe(X, y[:, None], C).W[:, 0]
    w2 = adapt.train_probe(X, y[:, None], 2 * C).W[:, 0]
    assert np.linalg.norm(w2) >= np.linalg.norm(w1) - 1e-9


@pytest.mark.parametrize("C", [0.0005, 0.05, 5.0])
def test_probe_matches_sklearn(C):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 5))
    y = (X @ np.array([1.0, -2.0, 0.5, 0.0, 1.0]) + rng.normal(size=200) > 0.3).astype(float)
    clf = adapt.train_probe(X, y[:, None], C)
    Z = (X - clf.means) / clf.stds
    ref = LogisticRegression(C=C, tol=1e-12, max_iter=10_000).fit(Z, y)
    ours = logistic_objective(Z, y, clf.W[:, 0], clf.b[0], C)
    theirs = logistic_objective(Z, y, ref.coef_[0], ref.intercept_[0], C)
    assert ours <= theirs + 1e-10
    assert np.allclose(clf.W[:, 0], ref.coef_[0], atol=1e-5)


def test_probe_deterministic_and_single_class_error():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(30, 4)), (rng.uniform(size=(30, 2)) < 0.5).astype(float)
    a, b = adapt.train_probe(X, Y), adapt.train_probe(X, Y)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
    Y[:, 1] = 1
    with pytest.raises(adapt.ProbeError, match="afib"):
        adapt.train_probe(X, Y, label_names=["x", "afib"])


# --- coefficients -------------------------------------------------------------

def _clf(W):
    W = np.asarray(W, dtype=float)
    return adapt.Classifier(W, np.zeros(W.shape[1]), np.zeros(W.shape[0]),
                            np.ones(W.shape[0]), 1.0)


def test_coefficient_examples():
    rep = adapt.coefficient_report(_clf(np.zeros((4, 2))), [0, 0, 1, 1])
    assert all(r["or_pos"] == 1 and r["or_neg"] == 1 and r["ratio"] == 1 for r in rep["labels"])
    W = np.zeros((4, 2))
    W[:2, 0] = 0.1
    W[2:, 1] = 0.1
    rep = adapt.coefficient_report(_clf(W), [0, 0, 1, 1])
    assert rep["mean_ratio"] == pytest.approx(math.exp(0.1), rel=1e-12)
    rep = adapt.coefficient_report(_clf(np.ones((2, 1))), [0, 0])
    assert rep["labels"][0]["ratio"] is None and rep["mean_ratio"] is None


def test_sign_test():
    r = adapt.sign_test([1.2] * 9 + [0.9])
    assert r["above"] == 9 and r["p_value"] == pytest.approx(11 / 1024)
    assert adapt.sign_test([None, 1.0])["p_value"] == 1.0
