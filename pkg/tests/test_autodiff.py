"""AD engine: forward evaluation, VJP/JVP oracles, second-order consistency."""

import numpy as np
import pytest

from curvkit import autodiff as ad
from curvkit import model as md

from helpers import mlp, random_mlp


def test_forward_identity_linear():
    model = md.Model([md.linear(2, 2)])
    params = [np.eye(2), np.zeros(2)]
    out = md.forward_eval(model, params, np.array([1.0, 2.0]))
    assert np.array_equal(out, [1.0, 2.0])


def test_forward_hand_affine():
    model = md.Model([md.linear(2, 2)])
    params = [np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([1.0, 1.0])]
    out = md.forward_eval(model, params, np.array([1.0, 1.0]))
    assert np.array_equal(out, [3.0, 4.0])


def test_forward_matches_straight_line_reimplementation():
    # independent duplicate evaluation: plain numpy, no engine involved
    model, params = mlp((4, 6, 3), act="relu", seed=11)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    w1, b1, w2, b2 = params
    expected = np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
    got = md.forward_eval(model, params, x)
    assert np.max(np.abs(got - expected)) <= 1e-15


def test_forward_shape_errors():
    model, params = mlp((3, 2), seed=0)
    with pytest.raises(ValueError):
        md.forward_eval(model, params, np.zeros(4))
    with pytest.raises(ValueError):
        md.forward_eval(model, [params[0]], np.zeros(3))
    with pytest.raises(ValueError):
        md.forward_eval(model, params, np.array([np.nan, 0.0, 0.0]))


def test_vjp_linear_closed_form():
    # f = W x, cotangent u: gradient w.r.t. W is u x^T
    model = md.Model([md.linear(3, 2, bias=False)])
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 3))
    x = rng.standard_normal(3)
    u = rng.standard_normal(2)
    (grad_w,) = md.model_vjp(model, [w], x, u)
    assert np.allclose(grad_w, np.outer(u, x), atol=1e-14)


def test_vjp_zero_cotangent():
    model, params = mlp((3, 4, 2), seed=2)
    out = md.model_vjp(model, params, np.ones(3), np.zeros(2))
    assert all(np.array_equal(g, np.zeros_like(p)) for g, p in zip(out, params))


def test_vjp_against_finite_differences():
    rng = np.random.default_rng(3)
    model, params = mlp((3, 5, 2), act="sigmoid", seed=3)
    x = rng.standard_normal(3)
    u = rng.standard_normal(2)
    grads = md.model_vjp(model, params, x, u)
    h = 1e-6
    for i, p in enumerate(params):
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            bump = [q.copy() for q in params]
            bump[i][idx] += h
            up = float(u @ md.forward_eval(model, bump, x))
            bump[i][idx] -= 2 * h
            down = float(u @ md.forward_eval(model, bump, x))
            fd = (up - down) / (2 * h)
            scale = max(1.0, abs(grads[i][idx]))
            assert abs(fd - grads[i][idx]) / scale <= 1e-6
            it.iternext()


def test_jvp_zero_tangent():
    model, params = mlp((3, 4, 2), seed=4)
    out = md.model_jvp(model, params, np.ones(3), [np.zeros_like(p) for p in params])
    assert np.array_equal(out, np.zeros(2))


def test_jvp_linear_closed_form():
    model = md.Model([md.linear(3, 2, bias=False)])
    rng = np.random.default_rng(5)
    w = rng.standard_normal((2, 3))
    dw = rng.standard_normal((2, 3))
    x = rng.standard_normal(3)
    out = md.model_jvp(model, [w], x, [dw])
    assert np.allclose(out, dw @ x, atol=1e-14)


def test_jvp_against_finite_differences():
    rng = np.random.default_rng(6)
    model, params = mlp((4, 6, 3), act="tanh", seed=6)
    x = rng.standard_normal((2, 4))
    tangent = [rng.standard_normal(p.shape) for p in params]
    jv = md.model_jvp(model, params, x, tangent)
    h = 1e-6
    up = md.forward_eval(model, [p + h * t for p, t in zip(params, tangent)], x)
    down = md.forward_eval(model, [p - h * t for p, t in zip(params, tangent)], x)
    fd = (up - down) / (2 * h)
    assert np.max(np.abs(fd - jv)) / max(1.0, np.max(np.abs(jv))) <= 1e-6


def test_adjoint_identity_random_mlps():
    rng = np.random.default_rng(7)
    for _ in range(10):
        model, params = random_mlp(rng)
        x = rng.standard_normal((3, model.dim_in))
        u = rng.standard_normal((3, model.dim_out))
        v = [rng.standard_normal(p.shape) for p in params]
        jv = md.model_jvp(model, params, x, v)
        jtu = md.model_vjp(model, params, x, u)
        lhs = float(np.sum(u * jv))
        rhs = sum(float(np.sum(a * b)) for a, b in zip(jtu, v))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def _risk_graph(model, loss_ndarray, params_nodes, x, y):
    out, _ = md.trace_forward(model, params_nodes, x)
    r = ad.sub(out, y)
    return ad.sum_(ad.mul(r, r))


def test_second_order_consistency_reverse_vs_forward():
    # d/dtheta (grad^T v): reverse-over-reverse vs forward-over-reverse
    rng = np.random.default_rng(8)
    model, params = mlp((3, 5, 2), act="sigmoid", seed=8)
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 2))
    v = [rng.standard_normal(p.shape) for p in params]

    leaves = [ad.Var(p) for p in params]
    loss = _risk_graph(model, None, leaves, x, y)
    grads = ad.backward(loss, leaves)
    inner = None
    for g, t in zip(grads, v):
        term = ad.sum_(ad.mul(g, t))
        inner = term if inner is None else ad.add(inner, term)
    hv_rr = ad.grad_arrays(inner, leaves)

    dual_leaves = [ad.Var(ad.Dual(p, t)) for p, t in zip(params, v)]
    loss_d = _risk_graph(model, None, dual_leaves, x, y)
    hv_fr = [
        np.asarray(ad.val(g).tangent)
        for g in ad.backward(loss_d, dual_leaves)
    ]
    for a, b in zip(hv_rr, hv_fr):
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


def test_relu_second_derivative_is_zero_everywhere():
    # includes the kink at 0: subgradient fixed to 0
    x = ad.Var(np.array([-1.0, 0.0, 2.0]))
    y = ad.sum_(ad.relu(x))
    (g,) = ad.backward(y, [x])
    inner = ad.sum_(ad.mul(g, np.ones(3)))
    if isinstance(inner, ad.Var):
        (h,) = ad.grad_arrays(inner, [x])
    else:
        h = np.zeros(3)
    assert np.array_equal(h, np.zeros(3))
    assert np.array_equal(ad.primal(g), [0.0, 0.0, 1.0])


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    model, params = mlp((4, 5, 3), act="relu", seed=9)
    x = rng.standard_normal((6, 4))
    u = rng.standard_normal((6, 3))
    a = md.model_vjp(model, params, x, u)
    b = md.model_vjp(model, params, x, u)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert np.array_equal(
        md.forward_eval(model, params, x), md.forward_eval(model, params, x)
    )


def test_gradient_of_pure_quadratic():
    # L = (1/2) theta^T theta via sum-reduced mse on scaled unit inputs
    from curvkit import risk as rk

    d = 4
    model = md.Model([md.linear(d, 1, bias=False)])
    w = np.random.default_rng(10).standard_normal((1, d))
    data = rk.Dataset(np.eye(d) / np.sqrt(2.0), np.zeros((d, 1)))
    risk = rk.RiskSpec(model, rk.LossSpec("mse"), rk.Reduction("sum"))
    grad = rk.risk_gradient(risk, [w], data)
    assert np.allclose(grad, w.ravel(), atol=1e-14)


def test_gradient_linear_regression_closed_form():
    # mean-reduced ||theta^T x - y||^2 has gradient (2/N) X^T (X theta - y)
    from curvkit import risk as rk

    rng = np.random.default_rng(11)
    n, d = 8, 3
    x = rng.standard_normal((n, d))
    yv = rng.standard_normal((n, 1))
    model = md.Model([md.linear(d, 1, bias=False)])
    w = rng.standard_normal((1, d))
    risk = rk.RiskSpec(model, rk.LossSpec("mse"), rk.Reduction("mean"))
    grad = rk.risk_gradient(risk, [w], rk.Dataset(x, yv))
    closed = 2.0 / n * x.T @ (x @ w.ravel() - yv.ravel())
    assert np.max(np.abs(grad - closed)) <= 1e-12


def test_gradient_zero_at_minimizer():
    from curvkit import risk as rk

    rng = np.random.default_rng(12)
    n, d = 8, 3
    x = rng.standard_normal((n, d))
    model = md.Model([md.linear(d, 1, bias=False)])
    w = rng.standard_normal((1, d))
    sol = np.linalg.lstsq(x, x @ w.ravel(), rcond=None)[0]
    risk = rk.RiskSpec(model, rk.LossSpec("mse"), rk.Reduction("mean"))
    grad = rk.risk_gradient(risk, [sol[None, :]], rk.Dataset(x, (x @ w.ravel())[:, None]))
    assert np.max(np.abs(grad)) <= 1e-10
