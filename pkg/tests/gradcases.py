"""Finite-difference gradient cases for every autodiff op and every loss.

Each case draws a random instance and returns ``(leaves, fn)`` where ``fn``
maps a dict of autodiff leaves to a scalar node.  Non-scalar ops are reduced
with fixed random weights so that every output entry contributes.
"""

import numpy as np

from protossl import adapt, ssl
from protossl import autodiff as ad
from tests.oracles import central_difference, rel_error

H = 1e-5
TOL = 1e-4
INSTANCES = 20


def _away(x, points=(0.0,), margin=1e-3):
    """Push entries at least ``margin`` away from the given kink points."""
    x = np.array(x, dtype=float)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def _case_unary(op, sampler):
    def build(rng):
        x = sampler(rng)
        R = rng.normal(size=np.shape(op(ad.const(x)).value))
        return {"x": x}, lambda t: ad.sum(ad.mul(op(t["x"]), R))
    return build


def _case_binary(op, sa, sb):
    def build(rng):
        a, b = sa(rng), sb(rng)
        R = rng.normal(size=np.shape(op(ad.const(a), ad.const(b)).value))
        return {"a": a, "b": b}, lambda t: ad.sum(ad.mul(op(t["a"], t["b"]), R))
    return build


def _mat(r, c):
    return lambda rng: rng.normal(size=(r, c))


def _pos(r, c):
    return lambda rng: rng.uniform(0.3, 2.0, size=(r, c))


def _max_gap_ok(x, axis):
    s = np.sort(x, axis=axis)
    top = np.take(s, [-1], axis=axis)
    second = np.take(s, [-2], axis=axis)
    return np.all(top - second > 1e-3)


def _rowmax_case(axis):
    def build(rng):
        while True:
            x = rng.normal(size=(3, 4, 5))
            if _max_gap_ok(x, axis):
                break
        R = rng.normal(size=np.shape(ad.rowwise_max(ad.const(x), axis).value))
        return {"x": x}, lambda t: ad.sum(ad.mul(ad.rowwise_max(t["x"], axis), R))
    return build


def _take_rows_case(rng):
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, size=7)
    R = rng.normal(size=(7, 3))
    return {"x": x}, lambda t: ad.sum(ad.mul(ad.take_rows(t["x"], idx), R))


def _concat_case(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    R = rng.normal(size=(6, 3))
    return {"a": a, "b": b}, lambda t: ad.sum(ad.mul(ad.concat_rows([t["a"], t["b"]]), R))


def _graph5_case(rng):
    # five chained ops: matmul, add, relu, normalize, logsumexp
    x = rng.normal(size=(4, 3))
    W = rng.normal(size=(3, 5))
    b = rng.normal(size=(5,))
    while np.any(np.abs(x @ W + b) < 1e-3):
        b = rng.normal(size=(5,))

    def fn(t):
        h = ad.relu(ad.add(ad.matmul(t["x"], t["W"]), t["b"]))
        return ad.mean(ad.logsumexp(ad.row_l2_normalize(ad.add(h, 0.1)), axis=1))
    return {"x": x, "W": W, "b": b}, fn


OP_CASES = {
    "add": _case_binary(ad.add, _mat(3, 4), lambda r: r.normal(size=(4,))),
    "sub": _case_binary(ad.sub, _mat(3, 4), lambda r: r.normal(size=(3, 1))),
    "mul": _case_binary(ad.mul, _mat(3, 4), _mat(3, 4)),
    "scale": _case_unary(lambda x: ad.scale(x, -1.7), _mat(3, 4)),
    "relu": _case_unary(ad.relu, lambda r: _away(r.normal(size=(3, 4)))),
    "clamp_min": _case_unary(lambda x: ad.clamp_min(x, 0.2),
                             lambda r: _away(r.normal(size=(3, 4)), (0.2,))),
    "sigmoid": _case_unary(ad.sigmoid, _mat(3, 4)),
    "softplus": _case_unary(ad.softplus, _mat(3, 4)),
    "exp": _case_unary(ad.exp, _mat(3, 4)),
    "log": _case_unary(ad.log, _pos(3, 4)),
    "square": _case_unary(ad.square, _mat(3, 4)),
    "sqrt": _case_unary(ad.sqrt, _pos(3, 4)),
    "matmul": _case_binary(ad.matmul, _mat(3, 4), _mat(4, 2)),
    "transpose": _case_unary(ad.transpose, _mat(3, 4)),
    "reshape": _case_unary(lambda x: ad.reshape(x, (2, 6)), _mat(3, 4)),
    "take_rows": _take_rows_case,
    "concat_rows": _concat_case,
    "sum_all": _case_unary(lambda x: ad.sum(x), _mat(3, 4)),
    "sum_axis0": _case_unary(lambda x: ad.sum(x, axis=0), _mat(3, 4)),
    "sum_axis1_keepdims": _case_unary(lambda x: ad.sum(x, axis=1, keepdims=True), _mat(3, 4)),
    "mean": _case_unary(lambda x: ad.mean(x, axis=1), _mat(3, 4)),
    "rowwise_max_last": _rowmax_case(-1),
    "rowwise_max_middle": _rowmax_case(1),
    "logsumexp": _case_unary(lambda x: ad.logsumexp(x, axis=1), _mat(3, 4)),
    "softmax_axis0": _case_unary(lambda x: ad.softmax(x, axis=0), _mat(3, 4)),
    "softmax_axis1": _case_unary(lambda x: ad.softmax(x, axis=1), _mat(3, 4)),
    "row_l2_normalize": _case_unary(ad.row_l2_normalize, _mat(3, 4)),
    "cosine_sim_matrix": _case_binary(ad.cosine_sim_matrix, _mat(3, 4), _mat(5, 4)),
    "graph5": _graph5_case,
}


# --- losses -----------------------------------------------------------------

def _ntxent_case(rng):
    Z = rng.normal(size=(6, 4))
    tau = float(rng.uniform(0.1, 1.0))
    return {"Z": Z}, lambda t: ssl.nt_xent(t["Z"], tau)


def _koleo_case(rng):
    while True:
        P = rng.normal(size=(6, 3))
        Pn = P / np.linalg.norm(P, axis=1, keepdims=True)
        G = Pn @ Pn.T
        np.fill_diagonal(G, -np.inf)
        s = np.sort(G, axis=1)
        if np.all(s[:, -1] - s[:, -2] > 1e-3):      # unique nearest neighbours
            break
    return {"P": P}, lambda t: ssl.koleo(t["P"])


L_, M_ = 3, 2


def _acts(rng, B=5):
    while True:
        A = rng.uniform(-0.9, 0.9, size=(B, L_ * M_))
        blocks = A.reshape(B, L_, M_)
        if np.all(np.abs(blocks[..., 0] - blocks[..., 1]) > 1e-3) and np.all(np.abs(A) > 1e-3):
            return A


def _labels(rng, B=5):
    Y = (rng.uniform(size=(B, L_)) < 0.5).astype(float)
    Y[0], Y[1] = 1.0, 0.0
    return Y


def _ce_case(rng):
    A, Y = _acts(rng), _labels(rng)
    W, b = rng.normal(size=(L_ * M_, L_)), rng.normal(size=(L_,))
    return {"A": A, "W": W, "b": b}, lambda t: adapt.ce_loss(t["A"], t["W"], t["b"], Y)


def _clst_case(rng):
    A, Y = _acts(rng), _labels(rng)
    return {"A": A}, lambda t: adapt.clst_loss(t["A"], Y, M_)


def _sep_case(rng):
    A, Y = _acts(rng), _labels(rng)
    return {"A": A}, lambda t: adapt.sep_loss(t["A"], Y, M_)


_slot_labels = np.repeat(np.arange(L_), M_)


def _div_case(rng):
    while True:
        P = rng.normal(size=(L_ * M_, 4))
        # pull one same-label pair together so the hinge is active somewhere
        P[1] = P[0] + 0.3 * rng.normal(size=4)
        Pn = P / np.linalg.norm(P, axis=1, keepdims=True)
        if np.all(np.abs(Pn @ Pn.T - adapt.DIV_MARGIN) > 1e-3):
            break
    return {"P": P}, lambda t: adapt.div_loss(t["P"], _slot_labels)


def _cntrst_case(rng):
    P = rng.normal(size=(L_ * M_, 4))
    Y = _labels(rng, 8)
    Y[2] = 1.0
    return {"P": P}, lambda t: adapt.cntrst_loss(t["P"], _slot_labels, Y)


LOSS_CASES = {
    "nt_xent": _ntxent_case,
    "koleo": _koleo_case,
    "ce": _ce_case,
    "clst": _clst_case,
    "sep": _sep_case,
    "div": _div_case,
    "cntrst": _cntrst_case,
}


def check_case(build, seed: int) -> float:
    """Max relative error between analytic and numerical gradients."""
    rng = np.random.default_rng(seed)
    leaves, fn = build(rng)
    params = {k: ad.param(v.copy(), k) for k, v in leaves.items()}
    out = fn(params)
    ad.backward(out)
    worst = 0.0
    for name, p in params.items():
        x = leaves[name].copy()

        def f():
            vals = {k: ad.const(x if k == name else leaves[k]) for k in leaves}
            return float(fn(vals).value)
        num = central_difference(f, x, H)
        worst = max(worst, rel_error(p.grad, num))
    return worst
