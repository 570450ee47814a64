import math

import numpy as np
import pytest

from hetkit import numcore as nc
from hetkit.numcore import (
    NonFiniteGradientError,
    ParamStore,
    Tensor,
    adam_step,
    grad_check,
)


# ---------------------------------------------------------------------------
# Forward values
# ---------------------------------------------------------------------------


def test_log_sigmoid_values():
    assert nc.log_sigmoid(Tensor(0.0)).item() == pytest.approx(math.log(0.5), abs=1e-12)
    assert nc.log_sigmoid(Tensor(2.0)).item() == pytest.approx(-math.log(1 + math.exp(-2)))
    assert nc.log_sigmoid(Tensor(2.0)).item() == pytest.approx(-0.126928, abs=1e-6)


def test_log_sigmoid_saturation():
    hi = nc.log_sigmoid(Tensor(1e4)).item()
    lo = nc.log_sigmoid(Tensor(-1e4)).item()
    assert -1e-300 < hi <= 0.0
    assert lo == pytest.approx(-1e4)
    assert np.isfinite([hi, lo]).all()


def test_softmax_ce_uniform_logits():
    for c in (2, 5, 11):
        loss = nc.softmax_cross_entropy(Tensor(np.zeros((3, c))), [0, 1, c - 1])
        assert loss.item() == pytest.approx(math.log(c), abs=1e-12)


def test_softmax_ce_confident():
    z = np.zeros((1, 4))
    z[0, 2] = 1e3
    assert nc.softmax_cross_entropy(Tensor(z), [2]).item() == pytest.approx(0.0, abs=1e-12)


def test_softmax_ce_two_class_example():
    loss = nc.softmax_cross_entropy(Tensor([[1.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss.item() == pytest.approx(0.313262, abs=1e-6)


def test_softmax_ce_class_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        nc.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [2])


def test_sigmoid_bce_matches_manual():
    z = np.array([[0.5, -1.0], [2.0, 0.0]])
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = np.mean(
        [sum(-ti * math.log(s) - (1 - ti) * math.log(1 - s)
             for ti, s in zip(trow, 1 / (1 + np.exp(-zrow))))
         for zrow, trow in zip(z, t)]
    )
    assert nc.sigmoid_bce(Tensor(z), t).item() == pytest.approx(expected, abs=1e-12)


def test_pearson_abs_identical_and_negated():
    a = Tensor(np.array([1.0, 2.0, 4.0, -1.0]))
    assert nc.pearson_abs(a, a).item() == pytest.approx(1.0, abs=1e-6)
    b = Tensor(-a.data)
    assert nc.pearson_abs(a, b).item() == pytest.approx(1.0, abs=1e-6)


def test_pearson_abs_orthogonal():
    a = Tensor(np.array([1.0, 0.0, -1.0, 0.0]))
    b = Tensor(np.array([0.0, 1.0, 0.0, -1.0]))
    # covariance is exactly zero by hand
    assert nc.pearson_abs(a, b).item() == pytest.approx(0.0, abs=1e-12)


def test_pearson_abs_constant_vector_guarded():
    a = Tensor(np.array([3.0, 3.0, 3.0]))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    assert nc.pearson_abs(a, b).item() == pytest.approx(0.0, abs=1e-12)


def test_pearson_range_property(rng):
    for _ in range(50):
        a = Tensor(rng.standard_normal(6) * rng.uniform(0.1, 10))
        b = Tensor(rng.standard_normal(6) * rng.uniform(0.1, 10))
        v = nc.pearson_abs(a, b).item()
        assert 0.0 <= v <= 1.0


def test_loss_sign_properties(rng):
    for _ in range(20):
        z = Tensor(rng.standard_normal((4, 3)) * 5)
        assert nc.softmax_cross_entropy(z, rng.integers(0, 3, size=4)).item() >= 0.0
        assert np.all(nc.log_sigmoid(z).data <= 0.0)


def test_mean_aggregate_values():
    x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]))
    # row 0: neighbor {2}; row 1: neighbors {0, 1}; row 2: none
    indptr = np.array([0, 1, 3, 3])
    indices = np.array([2, 0, 1])
    out = nc.mean_aggregate(x, indptr, indices)
    assert np.allclose(out.data, [[5.0, 5.0], [0.5, 0.5], [0.0, 0.0]])


def test_mean_aggregate_permutation_equivariance(rng):
    n = 8
    x = rng.standard_normal((n, 3))
    nbrs = [sorted(rng.choice(n, size=rng.integers(0, 4), replace=False)) for _ in range(n)]
    indptr = np.cumsum([0] + [len(b) for b in nbrs])
    indices = np.concatenate([np.array(b, dtype=np.int64) for b in nbrs] or [np.array([], dtype=np.int64)])
    out = nc.mean_aggregate(Tensor(x), indptr, indices).data

    perm = rng.permutation(n)
    inv = np.argsort(perm)
    pnbrs = [sorted(inv[b].tolist()) for b in [np.array(nbrs[j], dtype=int) for j in perm]]
    pindptr = np.cumsum([0] + [len(b) for b in pnbrs])
    pindices = np.concatenate([np.array(b, dtype=np.int64) for b in pnbrs] or [np.array([], dtype=np.int64)])
    pout = nc.mean_aggregate(Tensor(x[perm]), pindptr, pindices).data
    assert np.allclose(pout, out[perm])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    store = ParamStore()
    p = store.add("w", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adam_step(store, lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert store.step_count == 1


def test_adam_single_step_bias_corrected():
    store = ParamStore()
    p = store.add("w", np.array([0.0]))
    p.grad = np.array([1.0])
    adam_step(store, lr=0.1)
    # m_hat = v_hat = 1 after bias correction: p -> -lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-6)


def test_adam_determinism(rng):
    def run():
        r = np.random.default_rng(0)
        store = ParamStore()
        p = store.add("w", r.standard_normal(5))
        for _ in range(10):
            p.grad = p.data * 0.5 + 1.0
            adam_step(store, lr=0.05)
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_adam_nonfinite_gradient_aborts():
    store = ParamStore()
    p = store.add("w", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradientError, match="w"):
        adam_step(store, lr=0.1)


def test_paramstore_save_load_roundtrip(tmp_path, rng):
    store = ParamStore()
    store.add("a", rng.standard_normal((3, 4)))
    store.add("b", rng.standard_normal(7))
    path = tmp_path / "params.bin"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.names() == ["a", "b"]
    for k in store.names():
        assert np.array_equal(loaded[k].data, store[k].data)
    # byte-stable: saving the loaded store reproduces the file
    path2 = tmp_path / "params2.bin"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def test_grad_check_linear():
    store = ParamStore()
    store.add("p", np.array([1.0, 2.0, 3.0]))
    coef = np.array([0.5, -1.5, 2.5])

    def loss(s):
        return nc.total_sum(nc.mul(s["p"], nc.constant(coef)))

    report = grad_check(loss, store)
    assert report.passed
    assert report.max_rel_error["p"] < 1e-10


def test_grad_check_quadratic():
    store = ParamStore()
    p = store.add("p", np.array([1.0, 2.0]))

    def loss(s):
        return nc.total_sum(nc.mul(s["p"], s["p"]))

    store.zero_grad()
    out = loss(store)
    out.backward()
    assert np.allclose(p.grad, [2.0, 4.0])
    assert grad_check(loss, store).passed


def _check(loss_fn, arrays, tol=1e-4):
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    report = grad_check(loss_fn, store, tol=tol)
    assert report.passed, report.max_rel_error
    return report


def test_grad_ops_elementwise(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal((3, 1))

    _check(lambda s: nc.total_sum(nc.add(s["a"], s["b"])), {"a": a, "b": b})
    _check(lambda s: nc.total_sum(nc.sub(s["a"], s["b"])), {"a": a, "b": b})
    _check(lambda s: nc.total_sum(nc.mul(s["a"], s["b"])), {"a": a, "b": b})
    _check(lambda s: nc.total_sum(nc.mul(s["a"], s["r"])), {"a": a, "r": row})  # broadcast
    _check(lambda s: nc.total_sum(nc.neg(s["a"])), {"a": a})
    _check(lambda s: nc.total_mean(nc.relu(s["a"])), {"a": a + 0.05})
    _check(lambda s: nc.total_mean(nc.log_sigmoid(s["a"])), {"a": a})


def test_grad_ops_matmul_take_concat(rng):
    a = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 2))
    _check(lambda s: nc.total_sum(nc.matmul(s["a"], s["w"])), {"a": a, "w": w})
    idx = np.array([0, 2, 2, 3])
    _check(lambda s: nc.total_sum(nc.take_rows(s["a"], idx)), {"a": a})
    _check(
        lambda s: nc.total_sum(nc.concat_rows([s["a"], s["b"]])),
        {"a": a, "b": rng.standard_normal((2, 3))},
    )
    _check(
        lambda s: nc.total_sum(nc.concat_cols([s["a"], s["b"]])),
        {"a": a, "b": rng.standard_normal((4, 5))},
    )


def test_grad_mean_aggregate(rng):
    x = rng.standard_normal((5, 3))
    indptr = np.array([0, 2, 2, 5])
    indices = np.array([0, 3, 1, 2, 4])
    w = rng.standard_normal((3, 1))

    def loss(s):
        agg = nc.mean_aggregate(s["x"], indptr, indices)
        return nc.total_sum(nc.matmul(agg, s["w"]))

    _check(loss, {"x": x, "w": w})


def test_grad_pearson(rng):
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((4, 6))
    _check(lambda s: nc.total_sum(nc.pearson_abs_rows(s["a"], s["b"])), {"a": a, "b": b})
    av = rng.standard_normal(8)
    bv = rng.standard_normal(8)
    _check(lambda s: nc.pearson_abs(s["a"], s["b"]), {"a": av, "b": bv})


def test_grad_losses(rng):
    z = rng.standard_normal((5, 3))
    targets = rng.integers(0, 3, size=5)
    _check(lambda s: nc.softmax_cross_entropy(s["z"], targets), {"z": z})
    t = (rng.random((5, 3)) < 0.4).astype(float)
    _check(lambda s: nc.sigmoid_bce(s["z"], t), {"z": z})


def test_backward_requires_scalar():
    t = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        t.backward()


def test_backward_accumulates_through_reuse():
    # y = p*p + p: dy/dp = 2p + 1
    store = ParamStore()
    p = store.add("p", np.array([3.0]))
    out = nc.total_sum(nc.add(nc.mul(p, p), p))
    out.backward()
    assert p.grad[0] == pytest.approx(7.0)
