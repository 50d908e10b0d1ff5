"""Shared fixture builders for the test suite."""

import numpy as np

from curvkit import model as md
from curvkit import risk as rk

ACTS = ("relu", "sigmoid", "tanh")


def mlp(dims, act="tanh", bias=True, seed=0):
    """A small MLP with the given layer widths and one activation kind."""
    layers = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(md.linear(din, dout, bias=bias))
        if i < len(dims) - 2 and act is not None:
            layers.append(md.activation(act, dout))
    model = md.Model(layers)
    return model, md.init_params(model, seed)


def random_mlp(rng, max_params=200, act=None, bias=True):
    """A randomly-sized MLP below the parameter budget."""
    while True:
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 9)) for _ in range(depth + 1)]
        act = act or ACTS[int(rng.integers(0, len(ACTS)))]
        model, params = mlp(dims, act=act, bias=bias, seed=int(rng.integers(0, 2**31)))
        if model.n_params <= max_params:
            return model, params


def regression_problem(seed=0, n=6, dims=(3, 4, 2), act="tanh", reduction="mean"):
    model, params = mlp(dims, act=act, seed=seed)
    rng = np.random.default_rng((seed, 100))
    data = rk.Dataset(
        rng.standard_normal((n, dims[0])), rng.standard_normal((n, dims[-1]))
    )
    risk = rk.RiskSpec(model, rk.LossSpec("mse"), rk.Reduction(reduction))
    return risk, params, data


def classification_problem(seed=0, n=6, dims=(3, 4, 3), act="tanh", reduction="mean"):
    model, params = mlp(dims, act=act, seed=seed)
    rng = np.random.default_rng((seed, 101))
    data = rk.Dataset(
        rng.standard_normal((n, dims[0])), rng.integers(0, dims[-1], n)
    )
    risk = rk.RiskSpec(model, rk.LossSpec("cross_entropy"), rk.Reduction(reduction))
    return risk, params, data


def flatten(params):
    return np.concatenate([np.ravel(p) for p in params])


def unflatten_like(vec, params):
    out, lo = [], 0
    for p in params:
        out.append(vec[lo : lo + p.size].reshape(p.shape))
        lo += p.size
    return out


def fd_gradient(fn, params, h=1e-6):
    """Central finite differences of a scalar function of a parameter list."""
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            bump = [q.copy() for q in params]
            bump[i][idx] += h
            up = fn(bump)
            bump[i][idx] -= 2 * h
            down = fn(bump)
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def partitions(n):
    """The spec's three standard partitions: one batch, two batches, singletons."""
    half = n // 2
    return (
        None,
        [list(range(half)), list(range(half, n))],
        [[i] for i in range(n)],
    )
