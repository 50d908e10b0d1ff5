"""Iterative matrix-free algorithms: CG, truncated Neumann inverses, Lanczos
tridiagonalization, and a thick-restart top-k symmetric eigensolver.

All routines consume :class:`~curvkit.linop.LinearOperator` (or anything with
a matching ``matvec``). They are deterministic given their inputs; randomness
only enters through explicitly seeded start vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linop import LinearOperator

Array = np.ndarray


class IndefiniteOperatorError(RuntimeError):
    """CG met non-positive curvature; the system is not SPD."""

    def __init__(self, iteration: int, curvature: float):
        super().__init__(
            f"non-positive curvature p^T A p = {curvature:.3e} at iteration {iteration}"
        )
        self.iteration = iteration
        self.curvature = curvature


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations; carries the best residuals."""

    def __init__(self, message: str, residuals):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class SolveReport:
    iterations: int
    residual_norm: float
    converged: bool


def cg_solve(
    op: LinearOperator,
    v: Array,
    rtol: float = 1e-10,
    atol: float = 0.0,
    maxiter: Optional[int] = None,
    callback: Optional[Callable[[Array], None]] = None,
) -> tuple[Array, SolveReport]:
    """Conjugate gradients for a symmetric positive-definite operator.

    Stops when ``||A z - v|| <= max(rtol * ||v||, atol)``. Raises
    :class:`IndefiniteOperatorError` on non-positive curvature instead of
    silently regularizing (damping is the caller's job). The report's
    residual norm is recomputed from the returned solution.
    """
    if not op.symmetric:
        raise ValueError("cg_solve requires a symmetric operator")
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if maxiter is None:
        maxiter = 10 * n
    threshold = max(rtol * np.linalg.norm(v), atol)
    x = np.zeros(n)
    r = v.copy()
    p = r.copy()
    rs = float(r @ r)
    iterations = 0
    for k in range(maxiter):
        if np.sqrt(rs) <= threshold:
            break
        ap = op.matvec(p)
        curv = float(p @ ap)
        if curv <= 0.0:
            raise IndefiniteOperatorError(k, curv)
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * ap
        iterations = k + 1
        if callback is not None:
            callback(x)
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.linalg.norm(op.matvec(x) - v))
    return x, SolveReport(iterations, residual, bool(residual <= max(threshold, 1e-300)))


def neumann_inverse(op: LinearOperator, v: Array, n_terms: int, scale: float = 1.0) -> Array:
    """Truncated Neumann series ``scale * sum_{k<=K} (I - scale*A)^k v``.

    Converges to ``A^{-1} v`` when the spectral radius of ``I - scale*A`` is
    below one; that is the caller's contract and is not checked. ``scale=1``
    recovers the plain series ``sum (I - A)^k``.
    """
    if n_terms < 0:
        raise ValueError("need a nonnegative number of terms")
    v = np.asarray(v, dtype=np.float64)
    u = v.copy()
    for _ in range(n_terms):
        u = v + u - scale * op.matvec(u)
    return scale * u


@dataclass
class LanczosFactorization:
    """Three-term recurrence output: T = tridiag(beta, alpha, beta)."""

    alpha: Array  # (m,) diagonal
    beta: Array  # (m-1,) off-diagonal
    basis: Optional[Array]  # (n, m) Lanczos vectors when requested
    steps: int
    breakdown: bool

    def tridiagonal(self) -> Array:
        t = np.diag(self.alpha)
        if self.steps > 1:
            t += np.diag(self.beta, 1) + np.diag(self.beta, -1)
        return t

    def ritz(self) -> tuple[Array, Array]:
        """Ritz values and the eigenvectors of T (columns)."""
        return np.linalg.eigh(self.tridiagonal())


_BREAKDOWN_TOL = 1e-12


def lanczos(
    op: LinearOperator,
    start: Array,
    steps: int,
    reorthogonalize: bool = True,
    keep_basis: bool = True,
) -> LanczosFactorization:
    """Symmetric Lanczos with optional full reorthogonalization.

    On early breakdown (an invariant subspace was found) the factorization is
    truncated at the achieved number of steps.
    """
    if not op.symmetric:
        raise ValueError("lanczos requires a symmetric operator")
    start = np.asarray(start, dtype=np.float64)
    nrm = np.linalg.norm(start)
    if nrm == 0.0:
        raise ValueError("start vector must be nonzero")
    if steps < 1 or steps > op.dim_in:
        raise ValueError("steps must be in [1, dim]")
    q = start / nrm
    basis = [q]
    alpha, beta = [], []
    breakdown = False
    for j in range(steps):
        w = op.matvec(basis[j])
        a = float(basis[j] @ w)
        alpha.append(a)
        w = w - a * basis[j]
        if j > 0:
            w = w - beta[j - 1] * basis[j - 1]
        if reorthogonalize:
            # two passes of classical Gram-Schmidt against the whole basis
            qmat = np.column_stack(basis)
            for _ in range(2):
                w = w - qmat @ (qmat.T @ w)
        if j == steps - 1:
            break
        b = float(np.linalg.norm(w))
        scale = max(1.0, abs(a))
        if b <= _BREAKDOWN_TOL * scale:
            breakdown = True
            break
        beta.append(b)
        basis.append(w / b)
    m = len(alpha)
    return LanczosFactorization(
        np.asarray(alpha),
        np.asarray(beta),
        np.column_stack(basis) if keep_basis else None,
        m,
        breakdown,
    )


def eigsh_topk(
    op: LinearOperator,
    k: int,
    tol: float = 1e-10,
    max_dim: Optional[int] = None,
    max_restarts: int = 200,
    seed: int = 0,
) -> tuple[Array, Array]:
    """Largest-k eigenpairs of a symmetric operator via thick-restart Lanczos.

    Returns eigenvalues in descending order and orthonormal eigenvectors as
    columns. Convergence requires ``||A q - lam q|| <= tol * max(1, |lam|)``
    for every requested pair; otherwise a :class:`ConvergenceError` carrying
    the best residuals is raised.
    """
    n = op.dim_in
    if not op.symmetric:
        raise ValueError("eigsh_topk requires a symmetric operator")
    if not 0 < k < n:
        raise ValueError("need 0 < k < dim")
    if max_dim is None:
        max_dim = min(n, max(2 * k + 10, 20))
    max_dim = min(max_dim, n)
    keep = min(k + 3, max_dim - 1)

    rng = np.random.default_rng(seed)
    # current subspace: columns of V with projected matrix T (dense, small)
    v_cols = np.zeros((n, 0))
    t_small = np.zeros((0, 0))
    q = rng.standard_normal(n)

    def orthonormalize(w, against):
        for _ in range(2):
            if against.shape[1]:
                w = w - against @ (against.T @ w)
        nrm = np.linalg.norm(w)
        return (w / nrm, nrm) if nrm > 1e-13 else (None, 0.0)

    residual_vec = None
    for _ in range(max_restarts):
        qn, _ = orthonormalize(q, v_cols)
        if qn is None:
            qn, _ = orthonormalize(rng.standard_normal(n), v_cols)
        # grow the basis by Rayleigh-Ritz steps (Lanczos with full reorth and
        # an explicitly projected matrix, which is cheap at desk scale)
        while v_cols.shape[1] < max_dim and qn is not None:
            v_cols = np.column_stack([v_cols, qn])
            w = op.matvec(qn)
            coeffs = v_cols.T @ w
            t_new = np.zeros((v_cols.shape[1], v_cols.shape[1]))
            t_new[: t_small.shape[0], : t_small.shape[1]] = t_small
            t_new[-1, :] = coeffs
            t_new[:, -1] = coeffs
            t_small = t_new
            w = w - v_cols @ (v_cols.T @ w)
            w = w - v_cols @ (v_cols.T @ w)
            nrm = np.linalg.norm(w)
            if nrm <= 1e-13:
                # invariant subspace found; continue in a fresh direction
                qn, _ = orthonormalize(rng.standard_normal(n), v_cols)
            else:
                qn = w / nrm
        # Ritz pairs of the projected matrix
        theta, s = np.linalg.eigh(t_small)
        order = np.argsort(theta)[::-1]
        theta, s = theta[order], s[:, order]
        ritz = v_cols @ s
        # explicit residuals for the top-k pairs
        residuals = np.empty(k)
        av = np.empty((n, k))
        for i in range(k):
            av[:, i] = op.matvec(ritz[:, i])
            residuals[i] = np.linalg.norm(av[:, i] - theta[i] * ritz[:, i])
        bounds = tol * np.maximum(1.0, np.abs(theta[:k]))
        if np.all(residuals <= bounds):
            vecs = ritz[:, :k]
            # one orthonormalization pass to counter drift
            vecs, _ = np.linalg.qr(vecs)
            return theta[:k].copy(), vecs
        # thick restart: keep the leading Ritz vectors, continue from the
        # worst-converged direction's residual
        n_keep = min(keep, v_cols.shape[1])
        v_cols = np.linalg.qr(ritz[:, :n_keep])[0]
        proj = np.column_stack([op.matvec(v_cols[:, i]) for i in range(n_keep)])
        t_small = v_cols.T @ proj
        t_small = 0.5 * (t_small + t_small.T)
        worst = int(np.argmax(residuals - bounds))
        residual_vec = av[:, worst] - theta[worst] * ritz[:, worst]
        q = residual_vec if np.linalg.norm(residual_vec) > 1e-13 else rng.standard_normal(n)
    raise ConvergenceError(
        f"eigsh_topk did not converge within {max_restarts} restarts "
        f"(best residuals {residuals})",
        residuals,
    )
