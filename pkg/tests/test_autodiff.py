import math

import numpy as np
import pytest

from tppkit import autodiff as ad


def _rand(rng, *shape):
    return ad.tensor(rng.normal(size=shape), requires_grad=True)


def test_softplus_closed_form():
    assert abs(ad.softplus_scaled(ad.tensor(0.0), 1.0).item() - math.log(2.0)) < 1e-12


def test_softplus_asymptotes():
    big = ad.softplus_scaled(ad.tensor(100.0), 1.0).item()
    assert abs(big - 100.0) < 1e-12
    assert ad.softplus_scaled(ad.tensor(-100.0), 1.0).item() < 1e-12
    # scaled variant: s * log(1 + exp(x/s))
    assert abs(ad.softplus_scaled(ad.tensor(0.0), 2.0).item() - 2.0 * math.log(2.0)) < 1e-12


def test_softplus_overflow_safe_threshold():
    x = ad.tensor(35.0)
    assert abs(ad.softplus_scaled(x, 1.0).item() - 35.0) < 1e-12


def test_softmax_normalizes():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = ad.tensor(rng.normal(size=(3, 7)) * 10)
        s = ad.softmax_lastdim(x)
        assert np.all(np.abs(s.data.sum(axis=-1) - 1.0) < 1e-12)


def test_softplus_derivative_is_sigmoid():
    x = ad.tensor(0.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.softplus_scaled(x, 1.0)
    ad.backward(tape, y)
    assert abs(float(x.grad) - 0.5) < 1e-12


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = _rand(rng, 4, 3), _rand(rng, 3, 2)

    def fn(a, b):
        return ad.reduce_sum(ad.mul(ad.matmul(a, b), ad.matmul(a, b)))

    assert ad.grad_check(fn, [a, b], eps=1e-5) < 1e-6


def test_concat_reduce_sum_gradient_is_ones():
    a = ad.tensor(np.ones(3), requires_grad=True)
    b = ad.tensor(np.ones(4), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.reduce_sum(ad.concat([a, b], axis=0))
    ad.backward(tape, y)
    assert np.array_equal(a.grad, np.ones(3)) and np.array_equal(b.grad, np.ones(4))


def test_masked_softmax_positions_get_zero_gradient():
    x = ad.tensor(np.array([[1.0, 2.0, 3.0, 4.0]]), requires_grad=True)
    mask = np.array([[False, True, False, True]])
    with ad.Tape() as tape:
        y = ad.reduce_sum(ad.mul(ad.softmax_lastdim(ad.masked_fill(x, mask, -np.inf)),
                                 ad.tensor(np.array([[1.0, 5.0, 2.0, 7.0]]))))
    ad.backward(tape, y)
    assert x.grad[0, 1] == 0.0 and x.grad[0, 3] == 0.0
    assert x.grad[0, 0] != 0.0 and x.grad[0, 2] != 0.0


def test_linear_function_gradient_exact():
    rng = np.random.default_rng(2)
    x = _rand(rng, 5)

    def fn(x):
        return ad.reduce_sum(ad.mul(x, ad.tensor(np.arange(5.0))))

    assert ad.grad_check(fn, [x], eps=1e-5) < 1e-10


def test_three_layer_perceptron_gradient():
    rng = np.random.default_rng(3)
    x = _rand(rng, 2, 4)
    w1, w2, w3 = _rand(rng, 4, 6), _rand(rng, 6, 5), _rand(rng, 5, 1)

    def fn(x, w1, w2, w3):
        h = ad.tanh(ad.matmul(x, w1))
        h = ad.tanh(ad.matmul(h, w2))
        return ad.reduce_sum(ad.matmul(h, w3))

    assert ad.grad_check(fn, [x, w1, w2, w3], eps=1e-5) < 1e-6


UNARY_OPS = {
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(ad.add(ad.mul(x, x), ad.tensor(0.5))),
    "tanh": lambda x: ad.tanh(x),
    "sigmoid": lambda x: ad.sigmoid(x),
    "softplus": lambda x: ad.softplus_scaled(x, 0.7),
    "softmax": lambda x: ad.mul(ad.softmax_lastdim(x), ad.tensor(np.arange(1.0, 5.0))),
    "reduce_mean": lambda x: ad.reduce_mean(x, axis=-1, keepdims=True),
    "slice": lambda x: ad.slice_axis(x, -1, 1, 3),
    "reshape": lambda x: ad.reshape(x, (2, 2, 3)),
    "swapaxes": lambda x: ad.swapaxes(x, 0, 1),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_primitive_vjp(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = _rand(rng, 3, 4)
    weights = ad.tensor(rng.normal(size=UNARY_OPS[name](x).data.shape))

    def fn(x):
        return ad.reduce_sum(ad.mul(UNARY_OPS[name](x), weights))

    assert ad.grad_check(fn, [x], eps=1e-6) < 1e-6


BINARY_OPS = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), ad.tensor(1.0))),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 3, 4), (4,))])
def test_binary_vjp_with_broadcast(name, shapes):
    rng = np.random.default_rng(5)
    a, b = _rand(rng, *shapes[0]), _rand(rng, *shapes[1])
    weights = ad.tensor(rng.normal(size=BINARY_OPS[name](a, b).data.shape))

    def fn(a, b):
        return ad.reduce_sum(ad.mul(BINARY_OPS[name](a, b), weights))

    assert ad.grad_check(fn, [a, b], eps=1e-6) < 1e-6


def test_layer_norm_vjp():
    rng = np.random.default_rng(6)
    x, g, b = _rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6)
    weights = ad.tensor(rng.normal(size=(4, 6)))

    def fn(x, g, b):
        return ad.reduce_sum(ad.mul(ad.layer_norm(x, g, b), weights))

    assert ad.grad_check(fn, [x, g, b], eps=1e-6) < 1e-6


def test_embedding_gather_vjp():
    rng = np.random.default_rng(7)
    table = _rand(rng, 5, 3)
    idx = np.array([[0, 2, 2], [4, 0, 1]])
    weights = ad.tensor(rng.normal(size=(2, 3, 3)))

    def fn(table):
        return ad.reduce_sum(ad.mul(ad.embedding_gather(table, idx), weights))

    assert ad.grad_check(fn, [table], eps=1e-6) < 1e-6


def test_logsumexp_matches_numpy():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 5)) * 4
    got = ad.logsumexp_lastdim(ad.tensor(x)).data
    want = np.log(np.exp(x - x.max(-1, keepdims=True)).sum(-1)) + x.max(-1)
    assert np.allclose(got, want, atol=1e-12)


def test_gradient_accumulates_over_paths():
    x = ad.tensor(2.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.add(ad.mul(x, x), ad.mul(x, ad.tensor(3.0)))  # x^2 + 3x
    ad.backward(tape, y)
    assert abs(float(x.grad) - 7.0) < 1e-12


def test_tape_reuse_is_error():
    x = ad.tensor(1.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    ad.backward(tape, y)
    with pytest.raises(ad.TapeError):
        ad.backward(tape, y)


def test_backward_requires_scalar():
    x = ad.tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, y)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.add(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((4, 5))))
    with pytest.raises(ad.ShapeError, match="inner dims"):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((4, 5))))


def test_ops_run_without_active_tape():
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.exp(ad.mul(x, x))
    assert y.grad is None and np.allclose(y.data, math.e)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = ad.tensor(rng.normal(size=(8, 8)))
    w = ad.tensor(rng.normal(size=(8, 8)))
    a = ad.layer_norm(ad.matmul(x, w), ad.tensor(np.ones(8)), ad.tensor(np.zeros(8))).data
    b = ad.layer_norm(ad.matmul(x, w), ad.tensor(np.ones(8)), ad.tensor(np.zeros(8))).data
    assert np.array_equal(a, b)
