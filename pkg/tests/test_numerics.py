import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nmcdr.numerics import (
    PRIMITIVES,
    AdamState,
    Record,
    ShapeError,
    SparseConst,
    UsageError,
    adam_step,
    max_relative_error,
    numeric_grad,
)
from nmcdr.numerics import _kernels_py, kernels


# -- forward examples ---------------------------------------------------------

def test_matmul_example():
    rec = Record()
    out = rec.matmul(rec.const([[1.0, 2.0]]), rec.const([[3.0], [4.0]]))
    assert rec.forward(out).tolist() == [[11.0]]


def test_sigmoid_of_zero():
    rec = Record()
    out = rec.sigmoid(rec.const([[0.0]]))
    assert rec.forward(out)[0, 0] == 0.5


def test_softmax_of_constant_row():
    rec = Record()
    out = rec.softmax_rows(rec.const([[2.5, 2.5, 2.5]]))
    np.testing.assert_allclose(rec.forward(out), [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_shape_error_names_shapes_and_op_index():
    rec = Record()
    a = rec.const(np.ones((2, 3)))
    b = rec.const(np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"op #2 matmul: \(2, 3\) @ \(2, 3\)"):
        rec.matmul(a, b)


def test_backward_before_forward_is_usage_error():
    rec = Record()
    x = rec.param("x", [[3.0]])
    y = rec.hadamard(x, x)
    with pytest.raises(UsageError):
        rec.backward(y)


# -- backward examples ----------------------------------------------------------

def test_grad_of_square():
    rec = Record()
    x = rec.param("x", [[3.0]])
    y = rec.hadamard(x, x)
    rec.forward(y)
    assert rec.backward(y)["x"][0, 0] == 6.0


def test_grad_of_sum_sigmoid():
    rec = Record()
    w = rec.param("W", [[0.0]])
    y = rec.reduce_sum(rec.sigmoid(w))
    rec.forward(y)
    assert rec.backward(y)["W"][0, 0] == 0.25


def test_unreachable_param_gets_zero_grad():
    rec = Record()
    x = rec.param("x", [[1.0, 2.0]])
    rec.param("unused", np.ones((3, 2)))
    y = rec.reduce_sum(x)
    rec.forward(y)
    g = rec.backward(y)
    assert g["unused"].shape == (3, 2) and not g["unused"].any()


def test_relu_subgradient_at_zero_is_zero():
    rec = Record()
    x = rec.param("x", [[0.0, 1.0, -1.0]])
    y = rec.reduce_sum(rec.relu(x))
    rec.forward(y)
    assert rec.backward(y)["x"].tolist() == [[0.0, 1.0, 0.0]]


# -- finite-difference oracle over every primitive ---------------------------------

def _random_csr(rng, n_rows, n_cols):
    dense = rng.normal(size=(n_rows, n_cols)) * (rng.random((n_rows, n_cols)) < 0.5)
    rows, cols = np.nonzero(dense)
    counts = np.bincount(rows, minlength=n_rows)
    return SparseConst(np.concatenate([[0], np.cumsum(counts)]), cols, dense[rows, cols], (n_rows, n_cols))


def _build(prim, rng):
    """Random small instance: returns (param arrays, builder(rec, tensors) -> output)."""
    m, n, k = (int(v) for v in rng.integers(1, 9, size=3))

    def away_from_zero(shape):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < 0.05, 0.3, x)

    if prim == "matmul":
        return {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))}, lambda r, t: r.matmul(t["a"], t["b"])
    if prim in ("add", "hadamard"):
        shape_b = [(m, n), (1, n), (m, 1), (1, 1)][int(rng.integers(4))]
        op = getattr(Record, prim)
        return {"a": rng.normal(size=(m, n)), "b": rng.normal(size=shape_b)}, lambda r, t: op(r, t["a"], t["b"])
    if prim == "scale":
        c = float(rng.normal())
        return {"a": rng.normal(size=(m, n))}, lambda r, t: r.scale(t["a"], c)
    if prim == "gather":
        idx = rng.integers(0, m, size=int(rng.integers(1, 9)))
        return {"a": rng.normal(size=(m, n))}, lambda r, t: r.gather(t["a"], idx)
    if prim == "scatter_add":
        idx = rng.integers(0, k, size=m)
        return {"a": rng.normal(size=(m, n))}, lambda r, t: r.scatter_add(t["a"], idx, k)
    if prim == "spmm":
        sc = _random_csr(rng, k, m)
        return {"a": rng.normal(size=(m, n))}, lambda r, t: r.spmm(sc, t["a"])
    if prim in ("sigmoid", "tanh", "softplus", "softmax_rows"):
        op = getattr(Record, prim)
        return {"a": 3 * rng.normal(size=(m, n))}, lambda r, t: op(r, t["a"])
    if prim == "relu":
        return {"a": away_from_zero((m, n))}, lambda r, t: r.relu(t["a"])
    if prim == "segment_softmax":
        sizes = rng.integers(0, 4, size=k)
        indptr = np.concatenate([[0], np.cumsum(sizes)])
        e = int(indptr[-1])
        if e == 0:
            indptr[-1] = e = 1
        return {"a": 2 * rng.normal(size=(e, 1))}, lambda r, t: r.segment_softmax(t["a"], indptr)
    if prim == "concat_cols":
        return ({"a": rng.normal(size=(m, n)), "b": rng.normal(size=(m, k))},
                lambda r, t: r.concat_cols([t["a"], t["b"], t["a"]]))
    if prim == "reduce_sum":
        axis = [None, 0, 1][int(rng.integers(3))]
        return {"a": rng.normal(size=(m, n))}, lambda r, t: r.reduce_sum(t["a"], axis=axis)
    raise AssertionError(prim)


def _scalarize(rec, out, weights):
    # random linear functional so every output entry contributes differently
    return rec.reduce_sum(rec.hadamard(out, rec.const(weights)))


@pytest.mark.parametrize("prim", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(prim):
    rng = np.random.default_rng(zlib.crc32(prim.encode()))
    for _trial in range(100):
        arrays_, build = _build(prim, rng)

        def loss(params, weights=None):
            rec = Record()
            ts = {k: rec.param(k, v) for k, v in params.items()}
            out = build(rec, ts)
            if weights is None:
                return rec, out
            y = _scalarize(rec, out, weights)
            rec.forward(y)
            return rec, y

        _, out = loss(arrays_)
        weights = rng.normal(size=out.shape)
        rec, y = loss(arrays_, weights)
        analytic = rec.backward(y)
        numeric = numeric_grad(lambda p: float(loss(p, weights)[1].value[0, 0]), arrays_)
        for name in arrays_:
            assert max_relative_error(analytic[name], numeric[name]) < 1e-4, (prim, name)


def test_gather_scatter_adjoint_pair():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    g = rng.normal(size=(9, 4))
    idx = rng.integers(0, 6, size=9)
    # <gather(x), g> == <x, scatter_add(g)>
    rec = Record()
    gx = rec.gather(rec.const(x), idx)
    sg = rec.scatter_add(rec.const(g), idx, 6)
    rec.forward()
    assert np.isclose((gx.value * g).sum(), (x * sg.value).sum(), rtol=1e-13)


# -- invariants -----------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    rec = Record()
    y = rec.forward(rec.softmax_rows(rec.const(x)))
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert (y > 0).all() and (y <= 1).all()


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 5))

    def run():
        rec = Record()
        h = rec.tanh(rec.matmul(rec.param("a", a), rec.param("b", b)))
        return rec.forward(rec.softmax_rows(h))

    assert run().tobytes() == run().tobytes()


def test_kernel_backends_agree():
    rng = np.random.default_rng(11)
    sc = _random_csr(rng, 30, 20)
    x = rng.normal(size=(20, 7))
    np.testing.assert_allclose(
        kernels.csr_spmm(sc.indptr, sc.indices, sc.data, x, 30),
        _kernels_py.csr_spmm(sc.indptr, sc.indices, sc.data, x, 30), atol=1e-13)
    idx = rng.integers(0, 5, size=40).astype(np.int64)
    y = rng.normal(size=(40, 3))
    np.testing.assert_allclose(kernels.scatter_add_rows(y, idx, 5),
                               _kernels_py.scatter_add_rows(y, idx, 5), atol=1e-13)
    indptr = np.array([0, 3, 3, 7, 8], dtype=np.int64)
    s = rng.normal(size=8) * 10
    a1 = kernels.segment_softmax(s, indptr)
    np.testing.assert_allclose(a1, _kernels_py.segment_softmax(s, indptr), atol=1e-14)
    g = rng.normal(size=8)
    np.testing.assert_allclose(kernels.segment_softmax_backward(a1, g, indptr),
                               _kernels_py.segment_softmax_backward(a1, g, indptr), atol=1e-14)


def test_sparse_transpose_roundtrip():
    rng = np.random.default_rng(5)
    sc = _random_csr(rng, 7, 4)
    np.testing.assert_array_equal(sc.transpose().toarray(), sc.toarray().T)


def test_nonfinite_is_hard_error():
    from nmcdr.numerics import NonFiniteError
    rec = Record()
    out = rec.scale(rec.const([[1e308]]), 10.0)
    with pytest.raises(NonFiniteError, match="op #1 scale"):
        rec.forward(out)


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([[1.0, -2.0]])}
    st_ = AdamState(lr=0.1)
    for _ in range(5):
        adam_step(st_, p, {"w": np.zeros((1, 2))})
    assert p["w"].tolist() == [[1.0, -2.0]]
    assert st_.step == 5


def test_adam_single_step_by_hand():
    # m = 0.1, v = 0.001; mhat = 1, vhat = 1 -> p = 1 - 0.1 * 1 / (1 + 1e-8)
    p = {"p": np.array([[1.0]])}
    adam_step(AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8), p, {"p": np.array([[1.0]])})
    assert p["p"][0, 0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p["p"][0, 0] == pytest.approx(0.9, abs=1e-7)


def test_adam_identical_params_identical_updates():
    g = np.array([[0.3, -0.7]])
    p = {"a": np.array([[0.5, 0.5]]), "b": np.array([[0.5, 0.5]])}
    st_ = AdamState(lr=0.01)
    for _ in range(3):
        adam_step(st_, p, {"a": g, "b": g})
    assert p["a"].tobytes() == p["b"].tobytes()


def test_adam_skips_params_without_grads_and_checks_shape():
    p = {"a": np.ones((2, 2)), "b": np.ones((1, 3))}
    st_ = AdamState(lr=0.1)
    adam_step(st_, p, {"a": np.ones((2, 2))})
    assert (p["b"] == 1).all() and "b" not in st_.m
    with pytest.raises(ValueError):
        adam_step(st_, p, {"a": np.ones((1, 2))})


def test_zero_learning_rate_changes_nothing():
    p = {"a": np.array([[0.2, 0.4]])}
    adam_step(AdamState(lr=0.0), p, {"a": np.array([[5.0, -1.0]])})
    assert p["a"].tolist() == [[0.2, 0.4]]
