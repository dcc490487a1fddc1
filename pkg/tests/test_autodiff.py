import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from convattn import autodiff as ad
from convattn.autodiff import ShapeError, Tape, Tensor, backward, finite_diff_grad, gradcheck

GRAD_RTOL = 1e-4
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = T([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(T(np.eye(2)), a).data, a.data)


def test_matmul_hand_dot_product():
    assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_annihilator():
    out = ad.matmul(T(np.zeros((2, 3))), T(np.random.default_rng(0).normal(size=(3, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m, p, q, r = rng.integers(1, 5, size=4)
        a, b, c = (T(rng.normal(size=s)) for s in ((m, p), (p, q), (q, r)))
        left = ad.matmul(ad.matmul(a, b), c).data
        right = ad.matmul(a, ad.matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=0, atol=1e-9)


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax_lastdim(T([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)


def test_softmax_log_weights():
    out = ad.softmax_lastdim(T([math.log(1), math.log(3)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)


def test_softmax_mask_forces_mass():
    out = ad.softmax_lastdim(T([5.0, -1e300]), mask=np.array([True, False])).data
    assert out.tolist() == [1.0, 0.0]


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError, match="fully masked"):
        ad.softmax_lastdim(T([[1.0, 2.0]]), mask=np.array([[False, False]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), finite)
def test_softmax_rows_and_shift_invariance(x, c):
    p = ad.softmax_lastdim(T(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax_lastdim(T(x + c)).data, p, atol=1e-12)


# ---------------------------------------------------------------- elementwise

def test_layer_norm_of_constant_is_zero():
    out = ad.layer_norm(T(np.full((1, 5), 3.7)), T(np.ones(5)), T(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_layer_norm_moments():
    x = np.random.default_rng(2).normal(size=(3, 8)) * 4 + 1
    out = ad.layer_norm(T(x), T(np.ones(8)), T(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-9)


@pytest.mark.parametrize("v", [2, 7, 55])
def test_cross_entropy_uniform_is_log_v(v):
    loss = ad.cross_entropy(T(np.zeros((3, v))), [0, 1, v - 1])
    assert loss.item() == pytest.approx(math.log(v), abs=1e-12)


def test_cross_entropy_empty_selection_is_zero():
    logits = T(np.random.default_rng(0).normal(size=(4, 3)), grad=True)
    with Tape() as tape:
        loss = ad.cross_entropy(logits, [0, 1, 2, 0], weights=np.zeros(4))
    backward(tape, loss)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(logits.grad, 0.0)


def test_gelu_zero():
    assert ad.gelu(T([0.0])).data.tolist() == [0.0]


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(T(np.ones(3)), T(np.ones(4)))


def test_add_bias_is_only_broadcast():
    out = ad.add_bias(T(np.zeros((2, 3))), T([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ShapeError):
        ad.add_bias(T(np.zeros((2, 3))), T(np.ones(2)))


def test_dropout_inverted_scaling_and_determinism():
    x = T(np.ones((200, 50)))
    a = ad.dropout(x, 0.1, np.random.default_rng(3)).data
    b = ad.dropout(x, 0.1, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.9}
    assert abs(a.mean() - 1.0) < 0.02
    assert ad.dropout(x, 0.1, None, training=False) is x


# ---------------------------------------------------------------- backward / finite differences

def test_backward_square_sum():
    x = T([1.0, -2.0, 3.0], grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_backward_unused_leaf_gets_zero():
    x = T([1.0, 2.0], grad=True)
    w = T([[5.0]], grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x)
    backward(tape, loss, leaves=[x, w])
    np.testing.assert_array_equal(w.grad, [[0.0]])


def test_backward_requires_scalar():
    x = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_tape_is_topologically_ordered():
    x = T(np.ones((2, 2)), grad=True)
    with Tape() as tape:
        y = ad.matmul(x, x)
        loss = ad.sum_all(ad.gelu(y))
    for i, rec in enumerate(tape.records):
        assert rec.output.node_id == i
        for inp in rec.inputs:
            assert inp.node_id is None or inp.node_id < i
    assert loss.node_id == len(tape) - 1


def test_finite_diff_sum_is_ones():
    x = T(np.random.default_rng(4).normal(size=(3, 2)))
    np.testing.assert_allclose(finite_diff_grad(ad.sum_all, x).data, np.ones((3, 2)), atol=1e-9)


def test_finite_diff_square():
    g = finite_diff_grad(lambda t: ad.sum_all(ad.mul(t, t)), T([3.0])).data
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda t: float("inf"), T([1.0]))


def test_softmax_pick_matches_backward():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = T(rng.normal(size=6))
        err, = gradcheck(lambda t: ad.sum_all(ad.mul(ad.softmax_lastdim(t), T(np.eye(6)[2]))), [x])
        assert err < GRAD_RTOL


def _weighted(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_all(ad.mul(out, Tensor(w)))


def _shape(rng):
    return tuple(int(s) for s in rng.integers(1, 5, size=2))


def _case_matmul(rng):
    m, p = _shape(rng)
    q = int(rng.integers(1, 5))
    return (lambda a, b: _weighted(ad.matmul(a, b), 0)), [T(rng.normal(size=(m, p))), T(rng.normal(size=(p, q)))]


def _case_batched_matmul(rng):
    m, p = _shape(rng)
    return (lambda a, b: _weighted(ad.matmul(a, b), 0)), [T(rng.normal(size=(2, m, p))), T(rng.normal(size=(2, p, 3)))]


def _unary(op):
    def case(rng):
        return (lambda a: _weighted(op(a), 1)), [T(rng.normal(size=_shape(rng)))]
    return case


def _binary(op):
    def case(rng):
        s = _shape(rng)
        return (lambda a, b: _weighted(op(a, b), 2)), [T(rng.normal(size=s)), T(rng.normal(size=s))]
    return case


def _case_add_bias(rng):
    s = _shape(rng)
    return (lambda a, b: _weighted(ad.add_bias(a, b), 3)), [T(rng.normal(size=s)), T(rng.normal(size=s[-1]))]


def _case_layer_norm(rng):
    # with 2 features the normalized output is always +-1 and the input gradient vanishes
    s = (int(rng.integers(1, 5)), int(rng.integers(3, 5)))
    return ((lambda x, g, b: _weighted(ad.layer_norm(x, g, b), 4)),
            [T(rng.normal(size=s)), T(rng.normal(size=s[-1])), T(rng.normal(size=s[-1]))])


def _case_masked_softmax(rng):
    s = (int(rng.integers(1, 5)), int(rng.integers(2, 5)))
    mask = rng.random(s) < 0.7
    mask[:, 0] = True
    return (lambda x: _weighted(ad.softmax_lastdim(x, mask), 5)), [T(rng.normal(size=s))]


def _case_cross_entropy(rng):
    n, v = _shape(rng)
    tgt = rng.integers(0, v, size=n)
    w = (rng.random(n) < 0.7).astype(float)
    return (lambda x: ad.cross_entropy(x, tgt, w)), [T(rng.normal(size=(n, v)))]


def _case_take_rows(rng):
    table = T(rng.normal(size=(4, 3)))
    ids = rng.integers(0, 4, size=(2, 3))
    return (lambda t: _weighted(ad.take_rows(t, ids), 6)), [table]


def _case_take_along_last(rng):
    n = int(rng.integers(1, 5))
    idx = rng.integers(0, 3, size=(n, n))
    return (lambda t: _weighted(ad.take_along_last(t, idx), 7)), [T(rng.normal(size=(2, n, 3)))]


def _case_index_last(rng):
    n = int(rng.integers(1, 5))
    idx = rng.integers(0, 3, size=(n, n))
    return (lambda t: _weighted(ad.index_last(t, idx), 8)), [T(rng.normal(size=(2, 3)))]


def _case_concat(rng):
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 1)))
    return (lambda x, y: _weighted(ad.concat([x, y]), 9)), [a, b]


def _case_structural(rng):
    x = T(rng.normal(size=(2, 3, 4)))
    return (lambda t: _weighted(ad.permute(ad.reshape(ad.transpose(t), (2, 2, 6)), (2, 0, 1)), 10)), [x]


def _case_repeat(rng):
    return (lambda t: _weighted(ad.repeat_leading(t, 3), 11)), [T(rng.normal(size=_shape(rng)))]


GRAD_CASES = {
    "matmul": _case_matmul,
    "batched_matmul": _case_batched_matmul,
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "gelu": _unary(ad.gelu),
    "transpose": _unary(ad.transpose),
    "softmax": _unary(ad.softmax_lastdim),
    "log_softmax": _unary(ad.log_softmax_lastdim),
    "mean": _unary(lambda a: ad.scale(ad.mean_all(a), 1.0)),
    "add_bias": _case_add_bias,
    "layer_norm": _case_layer_norm,
    "masked_softmax": _case_masked_softmax,
    "cross_entropy": _case_cross_entropy,
    "take_rows": _case_take_rows,
    "take_along_last": _case_take_along_last,
    "index_last": _case_index_last,
    "concat": _case_concat,
    "reshape_permute": _case_structural,
    "repeat_leading": _case_repeat,
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        fn, inputs = GRAD_CASES[name](rng)
        errs = gradcheck(fn, inputs, h=1e-5)
        assert max(errs) < GRAD_RTOL, (name, errs)


def test_identical_seeds_identical_tapes_and_gradients():
    def run():
        rng = np.random.default_rng(42)
        x = T(rng.normal(size=(3, 4)), grad=True)
        w = T(rng.normal(size=(4, 2)), grad=True)
        with Tape() as tape:
            y = ad.softmax_lastdim(ad.gelu(ad.matmul(x, w)))
            loss = ad.cross_entropy(y, [0, 1, 1])
        backward(tape, loss)
        return len(tape), [type(r.backward_fn).__name__ for r in tape.records], x.grad, w.grad

    a, b = run(), run()
    assert a[0] == b[0] and a[1] == b[1]
    assert a[2].tobytes() == b[2].tobytes() and a[3].tobytes() == b[3].tobytes()


def test_ops_outside_tape_do_not_record():
    x = T([1.0], grad=True)
    y = ad.scale(x, 2.0)
    assert y.node_id is None
