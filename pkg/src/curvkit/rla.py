"""Randomized estimation of operator properties.

Trace: Girard-Hutchinson, the variance-reduced Hutch++, and the exchangeable
leave-one-out XTrace. Diagonal: the Hutchinson-style ratio estimator and
XDiag. Squared Frobenius norm: one- and two-pass Hutchinson variants.
Spectral density and log-spectral density: Lanczos Ritz pairs smoothed with
Gaussian kernels.

Probe vectors derive from ``(seed, probe index)`` streams, so estimates are
bit-reproducible for a fixed seed and budget. The leave-one-out estimators
canonicalize the probe order internally, which makes them bit-invariant under
permutations of the same probe set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linop import LinearOperator
from .solvers import lanczos

Array = np.ndarray

PROBE_DISTRIBUTIONS = ("rademacher", "standard-normal")


@dataclass(frozen=True)
class ProbeSpec:
    """How to draw probe vectors: zero mean, unit covariance."""

    count: int
    seed: int = 0
    distribution: str = "rademacher"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("need at least one probe")
        if self.distribution not in PROBE_DISTRIBUTIONS:
            raise ValueError(f"unknown probe distribution {self.distribution!r}")

    def draw(self, index: int, dim: int) -> Array:
        rng = np.random.default_rng((self.seed, index))
        if self.distribution == "rademacher":
            return 2.0 * rng.integers(0, 2, dim).astype(np.float64) - 1.0
        return rng.standard_normal(dim)

    def matrix(self, dim: int) -> Array:
        return np.column_stack([self.draw(i, dim) for i in range(self.count)])


def hutchinson_trace(op: LinearOperator, probes: ProbeSpec) -> float:
    """Mean of v^T A v over the probes; unbiased for Tr(A)."""
    total = 0.0
    for i in range(probes.count):
        v = probes.draw(i, op.dim_in)
        total += float(v @ op.matvec(v))
    return total / probes.count


def _orth_basis(y: Array, rtol: float = 1e-10) -> tuple[Array, Array]:
    """Orthonormal range basis via SVD with rank truncation.

    Returns (Q, C) with Q = Y C, so products A Q can be formed from A Y.
    """
    u, s, vt = np.linalg.svd(y, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return y[:, :0], np.zeros((y.shape[1], 0))
    rank = int(np.sum(s > rtol * s[0]))
    return u[:, :rank], (vt[:rank].T / s[:rank])


def hutchpp_trace(op: LinearOperator, budget: int, seed: int = 0) -> float:
    """Hutch++: exact trace on a sketched range plus deflated residual probes.

    Spends ``budget`` matvecs: a third on the range sketch, a third on the
    exact part, a third on deflated probes. Residual probes are normalized to
    the unit sphere of the deflated subspace and scaled by its dimension,
    which keeps the estimator unbiased for Gaussian probes and makes it exact
    on multiples of the identity.
    """
    if budget < 3:
        raise ValueError("Hutch++ needs a budget of at least 3")
    k = budget // 3
    n = op.dim_in
    rng = np.random.default_rng((seed, 1))
    omega = rng.standard_normal((n, k))
    y = np.column_stack([op.matvec(omega[:, i]) for i in range(k)])
    q, _ = _orth_basis(y)
    exact = 0.0
    for i in range(q.shape[1]):
        exact += float(q[:, i] @ op.matvec(q[:, i]))
    resid = 0.0
    subspace_dim = n - q.shape[1]
    g = rng.standard_normal((n, k))
    for i in range(k):
        d = g[:, i] - q @ (q.T @ g[:, i])
        ad = op.matvec(d)
        ad = ad - q @ (q.T @ ad)
        resid += subspace_dim * float(d @ ad) / float(d @ d)
    return exact + resid / k


def _canonical_probe_order(omega: Array) -> Array:
    """Sort probe columns lexicographically so the estimate only depends on
    the probe set, not its order."""
    order = np.lexsort(omega[::-1])
    return omega[:, order]


def xtrace(op: LinearOperator, budget: int, seed: Optional[int] = 0,
           omega: Optional[Array] = None) -> float:
    """XTrace: exchangeable leave-one-out deflated trace estimation.

    ``budget`` counts matvecs; ``k = budget // 2`` probes are drawn (pass
    ``omega`` to supply the probe matrix directly). For each probe the other
    ``k - 1`` sketch responses form a deflation basis, giving k unbiased
    estimators that are averaged.
    """
    n = op.dim_in
    if omega is None:
        if budget < 4:
            raise ValueError("XTrace needs a budget of at least 4")
        k = budget // 2
        rng = np.random.default_rng((seed, 2))
        omega = rng.standard_normal((n, k))
    omega = _canonical_probe_order(np.asarray(omega, dtype=np.float64))
    k = omega.shape[1]
    if k < 2:
        raise ValueError("XTrace needs at least two probes")
    y = np.column_stack([op.matvec(omega[:, i]) for i in range(k)])
    w = np.column_stack([op.matvec(y[:, i]) for i in range(k)])  # A^2 Omega
    total = 0.0
    for i in range(k):
        rest = np.delete(np.arange(k), i)
        q, c = _orth_basis(y[:, rest])
        aq = w[:, rest] @ c  # A Q without extra matvecs
        exact = float(np.sum(q * aq))
        o = omega[:, i]
        defl = o - q @ (q.T @ o)
        a_defl = y[:, i] - aq @ (q.T @ o)
        # normalized residual probe, scaled by the deflated dimension
        quad = float(defl @ (a_defl - q @ (q.T @ a_defl)))
        resid = (n - q.shape[1]) * quad / float(defl @ defl)
        total += exact + resid
    return total / k


def frobenius_sq(op: LinearOperator, probes: ProbeSpec, variant: str = "one-pass") -> float:
    """Estimate ||A||_F^2 = Tr(A A^T).

    ``one-pass`` averages ||A v||^2 (one matvec per probe); ``two-pass``
    averages ||A^T v||^2 through the transpose product. Both are unbiased for
    isotropic probes and coincide in distribution for symmetric operators.
    """
    if variant not in ("one-pass", "two-pass"):
        raise ValueError(f"unknown variant {variant!r}")
    total = 0.0
    for i in range(probes.count):
        v = probes.draw(i, op.dim_in)
        w = op.matvec(v) if variant == "one-pass" else op.rmatvec(v)
        total += float(w @ w)
    return total / probes.count


def hutchinson_diag(op: LinearOperator, probes: ProbeSpec) -> Array:
    """Diagonal estimator: (sum_k v_k o A v_k) / (sum_k v_k o v_k)."""
    num = np.zeros(op.dim_in)
    den = np.zeros(op.dim_in)
    for i in range(probes.count):
        v = probes.draw(i, op.dim_in)
        num += v * op.matvec(v)
        den += v * v
    if np.any(den == 0.0):
        raise ZeroDivisionError("a diagonal entry received zero probe mass")
    return num / den


def xdiag(op: LinearOperator, budget: int, seed: Optional[int] = 0,
          omega: Optional[Array] = None) -> Array:
    """XDiag: leave-one-out deflated diagonal estimation (unbiased).

    Per probe i, the diagonal splits as diag(A P_i) computed exactly on the
    leave-one-out basis plus a stochastic estimate of diag(A (I - P_i)).
    """
    n = op.dim_in
    if omega is None:
        if budget < 4:
            raise ValueError("XDiag needs a budget of at least 4")
        k = budget // 2
        rng = np.random.default_rng((seed, 3))
        omega = rng.standard_normal((n, k))
    omega = _canonical_probe_order(np.asarray(omega, dtype=np.float64))
    k = omega.shape[1]
    if k < 2:
        raise ValueError("XDiag needs at least two probes")
    y = np.column_stack([op.matvec(omega[:, i]) for i in range(k)])
    w = np.column_stack([op.matvec(y[:, i]) for i in range(k)])
    total = np.zeros(n)
    for i in range(k):
        rest = np.delete(np.arange(k), i)
        q, c = _orth_basis(y[:, rest])
        aq = w[:, rest] @ c
        exact = np.sum(aq * q, axis=1)  # diag(A Q Q^T)
        o = omega[:, i]
        defl = o - q @ (q.T @ o)
        a_defl = y[:, i] - aq @ (q.T @ o)  # A (I-P) o
        # normalized probe scaled by the deflated dimension
        stoch = (n - q.shape[1]) * (defl * a_defl) / float(defl @ defl)
        total += exact + stoch
    return total / k


# ---------------------------------------------------------------------------
# spectral densities
# ---------------------------------------------------------------------------


@dataclass
class SpectralDensity:
    """Smoothed eigenvalue density on a grid, with the raw Ritz quadrature."""

    grid: Array
    density: Array
    width: float
    nodes: Array  # all Ritz values across runs
    weights: Array  # matching quadrature weights (sum to 1)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def _gaussian_mixture(grid: Array, nodes: Array, weights: Array, width: float) -> Array:
    out = np.zeros_like(grid)
    norm = 1.0 / (np.sqrt(2.0 * np.pi) * width)
    for t, w in zip(nodes, weights):
        out += w * norm * np.exp(-0.5 * ((grid - t) / width) ** 2)
    return out


def _ritz_quadrature(op: LinearOperator, n_runs: int, steps: int, seed: int):
    """Lanczos quadrature nodes/weights from random unit starts."""
    nodes, weights = [], []
    for run in range(n_runs):
        rng = np.random.default_rng((seed, run))
        start = rng.standard_normal(op.dim_in)
        fact = lanczos(op, start, steps, reorthogonalize=True, keep_basis=False)
        theta, s = fact.ritz()
        tau = s[0, :] ** 2
        nodes.append(theta)
        weights.append(tau / n_runs)
    return np.concatenate(nodes), np.concatenate(weights)


def _default_width(nodes: Array, steps: int) -> float:
    spread = float(nodes.max() - nodes.min())
    if spread <= 0.0:
        spread = max(1.0, abs(float(nodes[0])))
        return 1e-2 * spread
    return spread / (2.0 * steps)


def _default_grid(nodes: Array, width: float, n_points: int) -> Array:
    lo = float(nodes.min()) - 5.0 * width
    hi = float(nodes.max()) + 5.0 * width
    return np.linspace(lo, hi, n_points)


def spectral_density(
    op: LinearOperator,
    n_runs: int = 10,
    steps: int = 64,
    width: Optional[float] = None,
    grid: Optional[Array] = None,
    n_points: int = 1024,
    seed: int = 0,
) -> SpectralDensity:
    """Estimate the eigenvalue density as an average of smoothed Ritz masses.

    Each run draws a random unit start vector, runs ``steps`` Lanczos
    iterations with full reorthogonalization, and turns the tridiagonal
    eigenpairs into quadrature nodes (Ritz values) and weights (squared first
    eigenvector components). The default kernel width ties the resolution to
    the Lanczos step count; the default grid spans the Ritz range plus five
    widths, so the density integrates to one.
    """
    nodes, weights = _ritz_quadrature(op, n_runs, steps, seed)
    if width is None:
        width = _default_width(nodes, steps)
    if grid is None:
        grid = _default_grid(nodes, width, n_points)
    density = _gaussian_mixture(grid, nodes, weights, width)
    return SpectralDensity(grid, density, width, nodes, weights)


def log_spectral_density(
    op: LinearOperator,
    n_runs: int = 10,
    steps: int = 64,
    width: Optional[float] = None,
    epsilon: float = 1e-5,
    grid: Optional[Array] = None,
    n_points: int = 1024,
    seed: int = 0,
) -> SpectralDensity:
    """Density of log(|lambda| + epsilon): Ritz values are transformed and
    smoothed in the transformed coordinate."""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    nodes, weights = _ritz_quadrature(op, n_runs, steps, seed)
    nodes = np.log(np.abs(nodes) + epsilon)
    if width is None:
        width = _default_width(nodes, steps)
    if grid is None:
        grid = _default_grid(nodes, width, n_points)
    density = _gaussian_mixture(grid, nodes, weights, width)
    return SpectralDensity(grid, density, width, nodes, weights)
