import math

import numpy as np
import pytest

from rote import autodiff as ad
from rote.rote_core import apply_rotary_cs, cos_sin, inverse_frequencies, rotation_angles
from rote.selftest import op_gradient_errors


def T(x, grad=True):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_matmul_examples():
    b = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(ad.matmul(T(np.eye(2)), T(b)).data, b)
    assert ad.matmul(T([[1.0, 2]]), T([[3.0], [4]])).data.tolist() == [[11.0]]


def test_softmax_examples():
    assert np.allclose(ad.softmax_lastdim(T([0.0, 0, 0])).data, [1 / 3] * 3)
    assert np.allclose(ad.softmax_lastdim(T([math.log(2), 0.0])).data, [2 / 3, 1 / 3])
    out = ad.softmax_lastdim(T([5.0, 123.0, 5.0]), mask=np.array([True, False, True]))
    assert out.data.tolist() == [0.5, 0.0, 0.5]


def test_softmax_fully_masked_row_is_an_error():
    with pytest.raises(ValueError):
        ad.softmax_lastdim(T([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_layer_norm_examples():
    one, zero = T(np.ones(2)), T(np.zeros(2))
    assert np.allclose(ad.layer_norm(T([[3.0, 3.0]]), one, zero).data, 0.0)
    out = ad.layer_norm(T([[1.0, -1.0]]), one, zero).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_gather_ce_dropout_examples():
    table = T([[1.0, 2.0], [3.0, 4.0]])
    assert ad.embedding_gather(table, np.array([0])).data.tolist() == [[1.0, 2.0]]
    loss = ad.cross_entropy_logits(T([0.0, 0.0]), [0])
    assert abs(float(loss.data) - math.log(2)) < 1e-15
    x = T(np.arange(6.0).reshape(2, 3))
    assert ad.dropout(x, 0.0, 0) is x


def test_dropout_is_inverted_and_seeded():
    x = T(np.ones((200, 50)))
    a = ad.dropout(x, 0.25, 3).data
    b = ad.dropout(x, 0.25, 3).data
    assert np.array_equal(a, b)
    assert set(np.unique(a).round(6)) <= {0.0, round(1 / 0.75, 6)}
    assert abs(a.mean() - 1.0) < 0.05


def test_sum_of_squares_gradient_exact():
    x = T([1.0, 2.0, 3.0])
    f = lambda t: ad.tensor_sum(ad.mul(t, t))
    f(x).backward()
    assert x.grad.tolist() == [2.0, 4.0, 6.0]
    assert ad.grad_check(f, [T([1.0, 2.0, 3.0])], tol=1e-6).passed


def test_sum_of_product_gradient():
    rng = np.random.default_rng(0)
    A, B = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
    report = ad.grad_check(lambda a, b: ad.tensor_sum(ad.matmul(a, b)), [A, B])
    assert report.passed, report


def test_every_op_passes_grad_check():
    errors = op_gradient_errors(trials=20, seed=11)
    assert errors, "no op cases ran"
    bad = {k: v for k, v in errors.items() if v > 1e-4}
    assert not bad, bad


def test_rotary_adjoint_is_inverse_rotation(rng):
    hd = 8
    x = T(rng.normal(size=(3, hd)))
    ang = rotation_angles(np.array([3.0, 50.0, 900.0]), inverse_frequencies(100, hd))
    cos, sin = cos_sin(ang)
    out = ad.rotary_fuse(x, [(1.0, cos, sin)])
    g = rng.normal(size=out.shape)
    out.backward(g)
    inv_cos, inv_sin = cos_sin(-ang)
    assert np.allclose(x.grad, apply_rotary_cs(g, inv_cos, inv_sin), atol=1e-12)


def test_rotary_grad_check_through_constant_angles(rng):
    hd = 4
    ang = rotation_angles(np.array([0.0, 7.0]), inverse_frequencies(1e4, hd))
    cos, sin = cos_sin(ang)
    tables = [(1.5, cos, sin), (0.5, cos ** 2, sin * 0.3)]
    w = rng.normal(size=(2, hd))
    report = ad.grad_check(lambda t: ad.tensor_sum(ad.mul(ad.rotary_fuse(t, tables), w)), [T(rng.normal(size=(2, hd)))])
    assert report.passed


def test_gradients_accumulate_across_uses():
    x = T([2.0])
    y = ad.add(ad.mul(x, x), ad.multiply_scalar(x, 3.0))
    ad.tensor_sum(y).backward()
    assert x.grad.tolist() == [7.0]


def test_topological_order_on_diamond():
    x = T([1.0])
    a = ad.multiply_scalar(x, 2.0)
    b = ad.multiply_scalar(x, 3.0)
    c = ad.add(a, b)
    tape = ad.build_tape(c)
    pos = {id(t): i for i, t in enumerate(tape)}
    assert pos[id(x)] < pos[id(a)] < pos[id(c)]
    assert pos[id(b)] < pos[id(c)]


def test_no_grad_records_nothing():
    x = T([1.0, 2.0])
    with ad.no_grad():
        y = ad.multiply_scalar(x, 2.0)
    assert not y.requires_grad


def test_unsupported_broadcast_rejected():
    with pytest.raises(ad.ShapeError):
        ad.add(T(np.ones((2, 3))), T(np.ones((2, 1))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        ad.grad_check(lambda t: ad.tensor_sum(t), [ad.Tensor(np.ones(3, dtype=np.float32))])


def test_grad_check_flags_a_wrong_gradient():
    def bad_square(t):
        out = ad.mul(t, t)
        fn = out._backward
        out._backward = lambda g: fn(1.5 * g)
        return ad.tensor_sum(out)

    assert not ad.grad_check(bad_square, [T([1.0, -2.0])]).passed


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(4, 6))
    grads = []
    for _ in range(2):
        t = T(x.copy())
        w = T(np.linspace(-1, 1, 18).reshape(6, 3))
        loss = ad.cross_entropy_logits(ad.matmul(ad.layer_norm(t, T(np.ones(6)), T(np.zeros(6))), w), [0, 1, 2, 0])
        loss.backward()
        grads.append((t.grad.copy(), w.grad.copy()))
    assert all(np.array_equal(a, b) for a, b in zip(*grads))
