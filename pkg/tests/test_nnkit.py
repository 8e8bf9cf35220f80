import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epivax.nnkit import AdamState, DenseNetwork, NonFiniteGradientError, ShapeError, adam_step, backward
from epivax.nnkit import autodiff as ad


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


# ---- forward ----

def test_identity_layer():
    net = DenseNetwork([2, 2], [np.eye(2)], [np.zeros(2)], output="identity")
    np.testing.assert_array_equal(net([0.2, 0.8]), [0.2, 0.8])
    out = net.forward(np.array([0.2, 0.8]))
    np.testing.assert_array_equal(out.value, [0.2, 0.8])


def test_one_one_tanh():
    net = DenseNetwork([1, 1], [np.array([[2.0]])], [np.array([1.0])], output="tanh")
    assert net([0.0])[0] == pytest.approx(0.7615941559557649, abs=1e-12)


def test_sigmoid_output_range():
    rng = np.random.default_rng(0)
    net = DenseNetwork.init([3, 16, 4], rng, output="sigmoid")
    y = net(rng.normal(scale=50, size=(500, 3)))
    assert np.all((y >= 0) & (y <= 1))


def test_dimension_mismatch():
    net = DenseNetwork.init([3, 4, 1], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net([1.0, 2.0])
    with pytest.raises(ShapeError):
        net.forward(np.ones(5))


def test_affine_bounded_respects_bounds():
    rng = np.random.default_rng(1)
    net = DenseNetwork.init([8, 32, 32, 1], rng, output="affine-bounded", bounds=(0.01, 0.025))
    x = rng.normal(scale=20.0, size=(10_000, 8))
    y = net(x)
    assert y.min() >= 0.01 and y.max() <= 0.025


def test_graph_and_eager_agree():
    rng = np.random.default_rng(2)
    net = DenseNetwork.init([5, 7, 3], rng, hidden="sigmoid", output="affine-bounded", bounds=(-1, 2))
    x = rng.normal(size=(4, 5))
    np.testing.assert_allclose(net.forward(x).value, net(x), rtol=0, atol=1e-14)


# ---- backward ----

def test_square_derivative():
    x = ad.input_node(3.0)
    g = backward(ad.square(x))
    assert g[x] == pytest.approx(6.0)


def test_tanh_derivative_at_zero():
    x = ad.input_node(0.0)
    g = backward(ad.tanh(x))
    assert g[x] == pytest.approx(1.0)


def test_backward_rejects_non_scalar():
    x = ad.input_node(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_shared_subexpression_accumulates():
    x = ad.input_node(2.0)
    y = x * x + x * 3.0
    assert backward(y)[x] == pytest.approx(7.0)


@pytest.mark.parametrize("op,fn,dfn", [
    (ad.sqrt, np.sqrt, lambda v: 0.5 / np.sqrt(v)),
    (ad.log, np.log, lambda v: 1 / v),
    (ad.exp, np.exp, np.exp),
    (ad.sigmoid, lambda v: 1 / (1 + np.exp(-v)), lambda v: np.exp(-v) / (1 + np.exp(-v)) ** 2),
])
def test_unary_ops(op, fn, dfn):
    v = np.array([0.3, 1.7, 2.5])
    x = ad.input_node(v)
    y = ad.sum_(op(x))
    assert y.value == pytest.approx(fn(v).sum())
    np.testing.assert_allclose(backward(y)[x], dfn(v), rtol=1e-12)


def test_division_and_broadcast():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([0.5, 2.0])

    def f(a_, b_):
        return ad.sum_(ad.div(a_, b_) * a_)

    ga, gb = ad.grad(f, a, b)
    np.testing.assert_allclose(ga, central_diff(lambda z: np.sum(z / b * z), a), rtol=1e-7)
    np.testing.assert_allclose(gb, central_diff(lambda z: np.sum(a / z * a), b), rtol=1e-7)


def test_stack_index_clip_relu():
    v = np.array([0.4, -0.2, 1.5])

    def f(x):
        s = ad.stack([ad.relu(x), ad.clip(x, 0.0, 1.0)], axis=-1)
        return ad.sum_(s[:, 0] * s[:, 1]) + ad.sum_(s[:, 1])

    (g,) = ad.grad(f, v)
    ref = central_diff(lambda z: np.sum(np.maximum(z, 0) * np.clip(z, 0, 1)) + np.sum(np.clip(z, 0, 1)), v)
    np.testing.assert_allclose(g, ref, rtol=1e-7, atol=1e-9)


def _net_loss_grads(net, x):
    params = net.parameter_nodes()
    xn = ad.input_node(x)
    out = ad.sum_(ad.square(net.forward(xn, params)))
    g = backward(out, params + [xn])
    return [g[p] for p in params], g[xn]


def _loss_value(net, x):
    return float(np.sum(net(x) ** 2))


def test_random_two_layer_net_against_finite_differences():
    rng = np.random.default_rng(3)
    net = DenseNetwork.init([3, 6, 2], rng, output="sigmoid")
    x = rng.normal(size=(5, 3))
    grads, gx = _net_loss_grads(net, x)
    params = net.params()
    worst = 0.0
    for k, p in enumerate(params):
        def f(pk, k=k):
            ps = list(params)
            ps[k] = pk
            return _loss_value(net.with_params(ps), x)
        worst = max(worst, rel_err(grads[k], central_diff(f, p)))
    worst = max(worst, rel_err(gx, central_diff(lambda z: _loss_value(net, z), x)))
    assert worst < 1e-4


def test_forward_tangent_matches_input_derivative():
    rng = np.random.default_rng(4)
    net = DenseNetwork.init([1, 16, 16, 3], rng, output="sigmoid")
    t = np.linspace(0, 1, 7)[:, None]
    y, dy = net.forward_tangent(t, np.ones_like(t))
    h = 1e-6
    fd = (net(t + h) - net(t - h)) / (2 * h)
    np.testing.assert_allclose(y.value, net(t), atol=1e-14)
    np.testing.assert_allclose(dy.value, fd, rtol=1e-6, atol=1e-9)


def test_tangent_is_differentiable_wrt_params():
    rng = np.random.default_rng(5)
    net = DenseNetwork.init([1, 5, 2], rng, output="sigmoid")
    t = np.array([[0.1], [0.6]])
    params = net.parameter_nodes()
    _, dy = net.forward_tangent(t, np.ones_like(t), params)
    g = backward(ad.sum_(ad.square(dy)), params)

    def f(ps):
        h = 1e-6
        n2 = net.with_params(ps)
        return float(np.sum(((n2(t + h) - n2(t - h)) / (2 * h)) ** 2))

    base = net.params()
    w0 = base[0]
    fd = central_diff(lambda w: f([w] + base[1:]), w0, h=1e-4)
    np.testing.assert_allclose(g[params[0]], fd, rtol=1e-4, atol=1e-7)


# ---- adam ----

def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0]), np.array([[0.5]])]
    new, st_ = adam_step(AdamState.for_params(p, lr=0.1), p, [np.zeros(2), np.zeros((1, 1))])
    for a, b in zip(new, p):
        np.testing.assert_array_equal(a, b)
    assert st_.t == 1


def test_adam_first_step_hand_value():
    p = [np.array([1.0])]
    new, _ = adam_step(AdamState.for_params(p, lr=0.1), p, [np.array([1.0])])
    # m_hat = 1, v_hat = 1 -> p - 0.1 * 1 / (1 + 1e-8)
    assert new[0][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_moves_against_gradient():
    p = [np.array([0.0])]
    s = AdamState.for_params(p, lr=0.01)
    traj = [0.0]
    for _ in range(2):
        p, s = adam_step(s, p, [np.array([2.0])])
        traj.append(p[0][0])
    assert traj[0] > traj[1] > traj[2]


def test_adam_initial_moments_zero_and_v_nonnegative():
    p = [np.zeros(3)]
    s = AdamState.for_params(p)
    assert s.t == 0 and not s.m[0].any() and not s.v[0].any()
    rng = np.random.default_rng(0)
    for _ in range(5):
        p, s = adam_step(s, p, [rng.normal(size=3)])
        assert np.all(s.v[0] >= 0)


def test_adam_non_finite_aborts():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteGradientError, match="step 1"):
        adam_step(AdamState.for_params(p), p, [np.array([np.nan, 0.0])])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.for_params([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)])


def _train(seed):
    rng = np.random.default_rng(seed)
    net = DenseNetwork.init([2, 8, 1], rng)
    x = rng.normal(size=(16, 2))
    y = np.sin(x[:, :1])
    params = net.params()
    s = AdamState.for_params(params, lr=0.01)
    for _ in range(20):
        pn = [ad.parameter(p) for p in params]
        loss = ad.mean(ad.square(net.forward(x, pn) - y))
        g = backward(loss, pn)
        params, s = adam_step(s, params, [g[q] for q in pn])
    return params


def test_seed_determinism_bitwise():
    a, b = _train(11), _train(11)
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_json_roundtrip():
    net = DenseNetwork.init([3, 4, 1], np.random.default_rng(0), output="affine-bounded", bounds=(0.0, 2.0))
    doc = json.loads(net.to_json())
    assert set(doc) >= {"sizes", "weights", "biases", "activations"}
    back = DenseNetwork.from_json(net.to_json())
    x = np.random.default_rng(1).normal(size=(3, 3))
    np.testing.assert_array_equal(back(x), net(x))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_affine_bounded_property(seed, scale):
    rng = np.random.default_rng(seed)
    lo, hi = sorted(rng.uniform(-1, 1, size=2))
    net = DenseNetwork.init([4, 6, 1], rng, output="affine-bounded", bounds=(lo, hi))
    y = net(rng.normal(size=(50, 4)) * 10**scale)
    assert np.all((y >= lo) & (y <= hi))
