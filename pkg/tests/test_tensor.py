import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedvit import tensor as T
from mixedvit.tensor import (
    Tape,
    Tensor,
    ShapeError,
    backward,
    bmm,
    clamp_min,
    concat,
    dropout,
    elementwise,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    narrow,
    reshape,
    softmax,
    tlog,
    transpose,
    tsum,
)


def test_add_identity():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_mul_hand_arithmetic():
    out = elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
    np.testing.assert_array_equal(out.data, [8.0, 15.0])


def test_add_incompatible_broadcast_names_shapes():
    with pytest.raises(ShapeError) as exc:
        elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)


def test_bias_broadcast_add():
    out = Tensor(np.ones((3, 4))) + Tensor(np.arange(4.0))
    np.testing.assert_array_equal(out.data, np.ones((3, 4)) + np.arange(4.0))


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_dot_product():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_batched_shape():
    out = matmul(Tensor(np.zeros((5, 2, 3))), Tensor(np.zeros((3, 4))))
    assert out.shape == (5, 2, 4)


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])


def test_softmax_closed_form():
    out = softmax(Tensor([0.0, math.log(3.0)]), 0)
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_no_overflow():
    out = softmax(Tensor([1000.0, 1000.0]), 0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError):
        softmax(Tensor([1.0, 2.0]), 3)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
       st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(xs, c):
    x = np.array(xs)
    s1 = softmax(Tensor(x), 0).data
    s2 = softmax(Tensor(x + c), 0).data
    assert abs(s1.sum() - 1.0) < 1e-9
    assert (s1 >= 0).all()
    np.testing.assert_allclose(s1, s2, atol=1e-12)


def test_layer_norm_derived():
    out = layer_norm(Tensor([1.0, 3.0]), Tensor([1.0, 1.0]),
                     Tensor([0.0, 0.0]), eps=0.0)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_constant_row():
    out = layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)),
                     Tensor(np.full(3, 5.0)), eps=1e-5)
    np.testing.assert_allclose(out.data, np.full((1, 3), 5.0), atol=1e-6)


def test_layer_norm_gamma_zero():
    out = layer_norm(Tensor([[1.0, 4.0]]), Tensor(np.zeros(2)),
                     Tensor([7.0, 8.0]))
    np.testing.assert_allclose(out.data, [[7.0, 8.0]])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=10))
def test_layer_norm_standardizes(xs):
    x = np.array(xs)
    if x.std() < 1e-3:
        return
    out = layer_norm(Tensor(x), Tensor(np.ones(len(xs))),
                     Tensor(np.zeros(len(xs))), eps=0.0).data
    assert abs(out.mean()) < 1e-10
    assert abs(out.var() - 1.0) < 1e-8


def test_gelu_values():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    # Phi(1) frozen from a high-precision normal-CDF oracle
    np.testing.assert_allclose(gelu(Tensor([1.0])).data[0],
                               0.8413447460685429, atol=1e-12)
    assert abs(gelu(Tensor([-10.0])).data[0]) < 1e-9


def test_dropout_rate_zero_identity():
    x = Tensor([1.0, 2.0])
    assert dropout(x, 0.0, training=True) is x


def test_dropout_inference_identity():
    x = Tensor([1.0, 2.0])
    assert dropout(x, 0.2, training=False) is x


def test_dropout_seeded_mask_repeats():
    x = Tensor(np.ones(100))
    a = dropout(x, 0.5, training=True, rng=np.random.default_rng(7)).data
    b = dropout(x, 0.5, training=True, rng=np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_dropout_rate_out_of_range():
    with pytest.raises(ValueError):
        dropout(Tensor([1.0]), 1.0, training=True, rng=np.random.default_rng(0))


def test_concat_vectors():
    out = concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=0)
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_concat_shape_arithmetic():
    out = concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
    assert out.shape == (2, 8)


def test_concat_incompatible():
    with pytest.raises(ShapeError):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_backward_square():
    with Tape():
        x = Tensor([3.0], requires_grad=True)
        y = tsum(x * x)
    backward(y)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_linear_identity_path():
    with Tape():
        a = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        y = tsum(matmul(a, Tensor(np.eye(2))))
    backward(y)
    np.testing.assert_array_equal(a.grad, np.ones((2, 2)))


def test_backward_fanout_exact():
    with Tape():
        x = Tensor([5.0], requires_grad=True)
        y = tsum(x + x)
    backward(y)
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_skips_non_grad_leaves():
    with Tape() as tape:
        x = Tensor([2.0], requires_grad=True)
        c = Tensor([3.0])
        y = tsum(x * c)
    grads = backward(y)
    assert x.grad is not None and c.grad is None
    assert id(c) not in tape._leaf_ids
    assert all(nid < len(tape.nodes) for nid in grads)


def test_backward_rejects_non_scalar():
    with Tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * x
    with pytest.raises(ValueError):
        backward(y)


def test_grad_check_quadratic():
    err = grad_check(lambda x: tsum(x * x), np.array([1.0, -2.0, 3.0]))
    assert err < 1e-8


def test_grad_check_constant():
    err = grad_check(lambda x: tsum(x * Tensor(np.zeros(3))), np.ones(3))
    assert err == 0.0


def _rng_shapes(rng, max_params=64):
    # m >= 3: normalizing a length-2 axis is piecewise constant (output
    # always +-1), which makes finite differences meaningless there.
    n = int(rng.integers(2, 9))
    m = int(rng.integers(3, min(8, max_params // n) + 1))
    return n, m


@pytest.mark.parametrize("seed", range(4))
def test_grad_check_every_op_random_shapes(seed):
    rng = np.random.default_rng(seed)
    n, m = _rng_shapes(rng)
    a = rng.normal(size=(n, m))
    b = rng.normal(size=(n, m))
    k = rng.normal(size=(m, n))

    checks = {
        "add": lambda x: tsum(x + Tensor(b)),
        "sub": lambda x: tsum(elementwise("sub", Tensor(b), x)),
        "mul": lambda x: tsum(x * Tensor(b)),
        "mul_broadcast": lambda x: tsum(x * Tensor(b[0])),
        "matmul_lhs": lambda x: tsum(matmul(x, Tensor(k))),
        "matmul_rhs": lambda x: tsum(matmul(Tensor(b), reshape(x, (m, n)))),
        "softmax": lambda x: tsum(softmax(x, 1) * Tensor(b)),
        "layer_norm": lambda x: tsum(
            layer_norm(x, Tensor(np.linspace(0.5, 1.5, m)),
                       Tensor(np.linspace(-1, 1, m))) * Tensor(b)),
        "gelu": lambda x: tsum(gelu(x) * Tensor(b)),
        "concat": lambda x: tsum(concat([x, Tensor(b)], axis=0) *
                                 Tensor(np.vstack([b, a]))),
        "reshape": lambda x: tsum(reshape(x, (m, n)) * Tensor(k)),
        "transpose": lambda x: tsum(transpose(x, (1, 0)) * Tensor(k)),
        "narrow": lambda x: tsum(narrow(x, 0, 1, n - 1) * Tensor(b[1:])),
        "log": lambda x: tsum(tlog(clamp_min(x * x, 1e-3) + Tensor(np.ones_like(b)))),
        "sum_axis": lambda x: tsum(tsum(x, axis=0) * Tensor(b[0])),
        "dropout": lambda x: tsum(
            dropout(x, 0.4, training=True, rng=np.random.default_rng(99)) * Tensor(b)),
    }
    for name, f in checks.items():
        err = grad_check(f, a)
        assert err < 1e-5, f"{name} grad check failed: {err}"


def test_grad_check_bmm():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 3))
    w = rng.normal(size=(2, 3, 3))

    err = grad_check(lambda x: tsum(bmm(x, Tensor(b)) * Tensor(w)),
                     a)
    assert err < 1e-5
    err = grad_check(lambda x: tsum(bmm(Tensor(a), reshape(x, b.shape)) * Tensor(w)),
                     b.reshape(-1))
    assert err < 1e-5


def test_determinism_bitwise():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 5))

    def run():
        with Tape():
            t = Tensor(x, requires_grad=True)
            h = gelu(matmul(t, Tensor(x.T)))
            h = dropout(h, 0.3, training=True, rng=np.random.default_rng(5))
            y = tsum(softmax(h, 1))
        backward(y)
        return y.item(), t.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert y1 == y2
    np.testing.assert_array_equal(g1, g2)


def test_tape_topological_order():
    with Tape() as tape:
        x = Tensor([1.0], requires_grad=True)
        y = x * x
        z = tsum(y + x)
    del z
    for nid, node in enumerate(tape.nodes):
        for pid in node.parents:
            assert pid is None or pid < nid
