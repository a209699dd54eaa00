import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from penn import autodiff as ad
from penn.nn import (
    AdamState,
    LinearLayer,
    Mlp,
    adam_step,
    column_rank,
    leaky_relu,
    leaky_relu_inverse,
    mlp_backward,
    mlp_forward,
    mlp_from_dict,
    mlp_to_dict,
    pseudoinverse,
)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def check_op(build, *shapes, rng, tol=1e-6):
    inputs = [rng.normal(size=s) for s in shapes]
    seed = None
    for k in range(len(inputs)):
        vars_ = [ad.Var(v.copy(), requires_grad=(j == k)) for j, v in enumerate(inputs)]
        out = build(*vars_)
        if seed is None:
            seed = rng.normal(size=out.shape)
        ad.backward(out, seed)

        def f(x, k=k):
            args = [x if j == k else v for j, v in enumerate(inputs)]
            return float(np.sum(build(*[ad.as_var(a) for a in args]).value * seed))

        assert np.allclose(vars_[k].grad, numeric_grad(f, inputs[k]), rtol=tol, atol=tol)


def test_elementwise_ops_match_finite_differences(rng):
    check_op(lambda a, b: ad.add(a, b), (3, 2), (2,), rng=rng)
    check_op(lambda a, b: ad.mul(a, b), (3, 2), (3, 1), rng=rng)
    check_op(lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)), (4,), (4,), rng=rng)
    check_op(lambda a: ad.tanh(a), (5,), rng=rng)
    check_op(lambda a: ad.leaky_relu(ad.add(a, 0.1), 0.5), (6,), rng=rng)
    check_op(lambda a: ad.transpose(ad.reshape(a, (2, 3, 2)), (2, 0, 1)), (12,), rng=rng)
    check_op(lambda a, b: ad.vdot(a, b), (3, 3), (3, 3), rng=rng)


def test_linear_and_row_ops(rng):
    check_op(lambda x, w, b: ad.linear(x, w, b), (5, 2, 3), (4, 3), (4,), rng=rng)
    A = sp.random(6, 4, density=0.5, random_state=1, format="csr")
    check_op(lambda x: ad.spmm(A, x), (4, 3), rng=rng)
    idx = np.array([0, 2, 2])
    check_op(lambda x: ad.gather_rows(x, idx), (4, 2), rng=rng)
    check_op(lambda v: ad.scatter_rows(v, [1, 3], 5), (2, 2), rng=rng)
    check_op(lambda x, v: ad.overwrite_rows(x, [0, 3], v), (4, 2), (2, 2), rng=rng)


def test_pinv_gradient(rng):
    check_op(lambda w: ad.pinv(w), (5, 3), rng=rng, tol=1e-5)
    check_op(lambda w: ad.pinv(w), (2, 4), rng=rng, tol=1e-5)


def test_shared_subexpression_accumulates():
    x = ad.Var(np.array([2.0, -1.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.total(ad.add(y, y)))
    assert np.array_equal(x.grad, [8.0, -4.0])


def test_leaky_relu_examples(rng):
    assert leaky_relu(-2.0, 0.5) == -1.0
    assert leaky_relu_inverse(-1.0, 0.5) == -2.0
    assert leaky_relu(3.0, 0.01) == 3.0
    x = rng.normal(scale=5, size=1000)
    assert np.max(np.abs(leaky_relu_inverse(leaky_relu(x)) - x)) == 0.0
    with pytest.raises(ValueError):
        leaky_relu(1.0, 0.0)


def test_pseudoinverse_examples(rng):
    W = rng.normal(size=(4, 4))
    assert np.allclose(pseudoinverse(W), np.linalg.inv(W), atol=1e-10)
    w = rng.normal(size=(16, 1))
    assert np.allclose(pseudoinverse(w), w.T / np.sum(w**2), atol=1e-14)
    W = rng.normal(size=(16, 4))
    assert np.allclose(pseudoinverse(W) @ W, np.eye(4), atol=1e-8)
    assert pseudoinverse(np.zeros((3, 2))).shape == (2, 3)
    R = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
    assert np.allclose(pseudoinverse(R), np.linalg.pinv(R), atol=1e-10)
    assert column_rank(R) == 2


def test_layer_pinv_cache_tracks_updates(rng):
    layer = LinearLayer.init(rng, 3, 5)
    P = layer.pinv()
    assert not layer.stale and layer.pinv() is P
    layer.weight.assign(layer.weight.value * 2)
    assert layer.stale
    assert np.allclose(layer.pinv(), P / 2)


def test_mlp_forward_examples():
    m = Mlp([LinearLayer.identity(2, bias=True)], ["leaky_relu"], slope=0.5)
    assert np.array_equal(mlp_forward(m, np.array([1.0, -2.0])).value, [1.0, -1.0])
    layer = LinearLayer(np.ones((2, 2)), np.array([0.5, -4.0]))
    out = mlp_forward(Mlp([layer], ["leaky_relu"]), np.zeros(2)).value
    assert np.array_equal(out, [0.5, -2.0])
    with pytest.raises(ValueError):
        mlp_forward(m, np.zeros(3))


def test_mlp_backward_matches_finite_differences(rng):
    m = Mlp.build(rng, [3, 5, 2], activation="tanh")
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))
    grads = mlp_backward(m, x, up)
    for p in m.parameters():
        def f(v, p=p):
            old = p.value
            p.value = v
            out = float(np.sum(mlp_forward(m, x).value * up))
            p.value = old
            return out

        num = numeric_grad(f, p.value.copy())
        assert np.allclose(grads[p.name], num, rtol=1e-5, atol=1e-8)


def test_mlp_jvp_matches_finite_differences(rng):
    m = Mlp.build(rng, [1, 6, 4], decodable=True)
    x = rng.normal(size=(5, 1))
    t = rng.normal(size=(5, 1))
    eps = 1e-6
    num = (mlp_forward(m, x + eps * t).value - mlp_forward(m, x - eps * t).value) / (2 * eps)
    assert np.allclose(m.jvp(x, t).value, num, atol=1e-6)


def test_decodable_mlp_rejects_tanh(rng):
    with pytest.raises(ValueError, match="not invertible"):
        Mlp.build(rng, [1, 4], activation="tanh", decodable=True)


def test_mlp_dict_round_trip(rng):
    m = Mlp.build(rng, [1, 4, 4], decodable=True)
    m2 = mlp_from_dict(mlp_to_dict(m))
    x = rng.normal(size=(3, 1))
    assert np.array_equal(m(x).value, m2(x).value)


def test_adam_examples():
    p = LinearLayer(np.array([[1.0]])).weight
    st_ = AdamState([p], lr=1e-3)
    adam_step(st_, [np.zeros((1, 1))])
    assert p.value[0, 0] == 1.0 and st_.step_count == 1
    st_ = AdamState([p], lr=1e-3)
    adam_step(st_, [np.ones((1, 1))])
    assert abs(p.value[0, 0] - (1.0 - 1e-3 / (1.0 + 1e-8))) < 1e-15
    for _ in range(50):
        adam_step(st_, [np.full((1, 1), -0.3)])
    assert p.value[0, 0] > 1.0


def test_adam_zero_lr_leaves_parameters(rng):
    p = LinearLayer.init(rng, 2, 2).weight
    before = p.value.copy()
    st_ = AdamState([p], lr=0.0)
    for _ in range(5):
        adam_step(st_, [rng.normal(size=(2, 2))])
    assert np.array_equal(p.value, before)


@given(st.floats(-1e3, 1e3), st.floats(0.05, 2.0))
def test_leaky_relu_inverse_property(x, a):
    assert abs(leaky_relu_inverse(leaky_relu(x, a), a) - x) <= 1e-12 * max(1.0, abs(x))
