"""Downstream routines composing curvature operators, solvers, and estimators:
damped Newton/natural-gradient steps, influence functions, Fisher-weighted
model merging, saliency-based pruning, and gradient/top-eigenspace overlap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .curvature import (
    DampingConfig,
    GGNOperator,
    HessianOperator,
    KFACInverseOperator,
    kfac_compute,
    make_curvature,
)
from .linop import FunctionOperator, LinearOperator, shift
from .risk import Batching, Dataset, Reduction, RiskSpec, risk_gradient, take_batch
from .solvers import SolveReport, cg_solve, eigsh_topk
from .rla import xdiag

_SUM = Reduction("sum")

Array = np.ndarray


@dataclass
class NewtonStepResult:
    """Damped second-order update direction (step size is the caller's)."""

    direction: Array
    damping: float
    report: Optional[SolveReport]


def _solve_damped(op: LinearOperator, damping: float, rhs: Array, rtol, maxiter):
    return cg_solve(shift(op, damping), rhs, rtol=rtol, maxiter=maxiter)


def newton_step(
    risk: RiskSpec,
    params,
    data: Dataset,
    curvature: Union[str, LinearOperator] = "ggn",
    damping: float = 1e-3,
    batching: Batching = None,
    cg_rtol: float = 1e-10,
    cg_maxiter: Optional[int] = None,
    kfac_flavor: str = "ggn",
    kfac_damping_scheme: str = "exact",
    mc_samples: int = 1,
    seed: int = 0,
) -> NewtonStepResult:
    """Direction ``(C + damping I)^{-1} g`` for Newton or natural gradient.

    ``curvature`` is a kind name or a prebuilt operator; CG solves the damped
    system except for KFAC, where the damped Kronecker inverse is applied
    directly.
    """
    if damping <= 0.0:
        raise ValueError("newton_step requires positive damping")
    g = risk_gradient(risk, params, data, batching)
    if curvature == "kfac":
        blocks = kfac_compute(
            risk, params, data, kfac_flavor, batching, n_samples=mc_samples, seed=seed
        )
        inv = KFACInverseOperator(blocks, DampingConfig(damping, kfac_damping_scheme))
        return NewtonStepResult(inv.matvec(g), damping, None)
    if isinstance(curvature, LinearOperator):
        op = curvature
    else:
        op = make_curvature(
            curvature, risk, params, data, batching, n_samples=mc_samples, seed=seed
        )
    direction, report = _solve_damped(op, damping, g, cg_rtol, cg_maxiter)
    return NewtonStepResult(direction, damping, report)


@dataclass
class InfluenceResult:
    influence: Array
    datum_index: int
    report: SolveReport


def influence_upweight(
    risk: RiskSpec,
    params,
    data: Dataset,
    datum_index: int,
    damping: float,
    curvature: str = "hessian",
    batching: Batching = None,
    cg_rtol: float = 1e-10,
    cg_maxiter: Optional[int] = None,
) -> InfluenceResult:
    """Influence of up-weighting one datum: ``(H + damping I)^{-1} grad P``.

    The perturbation is ``P = R_D * loss(f(x_n), y_n)``. Parameters are
    assumed to sit near a minimizer (not checked). Sign convention: the
    returned vector equals ``-d theta_hat / d eps`` of the perturbed
    minimizer. The Hessian can be swapped for the GGN.
    """
    if damping <= 0.0:
        raise ValueError("influence requires positive damping")
    if not 0 <= datum_index < data.n:
        raise IndexError("datum index out of range")
    if curvature not in ("hessian", "ggn"):
        raise ValueError("influence curvature must be 'hessian' or 'ggn'")
    cls = HessianOperator if curvature == "hessian" else GGNOperator
    op = cls(risk, params, data, batching)
    single = take_batch(data, np.array([datum_index]))
    r_full = risk.reduction.factor(data.n, risk.model.dim_out)
    perturbation_grad = r_full * risk_gradient(
        RiskSpec(risk.model, risk.loss, _SUM), params, Dataset(single.x, single.y)
    )
    vec, report = _solve_damped(op, damping, perturbation_grad, cg_rtol, cg_maxiter)
    return InfluenceResult(vec, datum_index, report)


def _operator_diagonal(op: LinearOperator, source: str, budget: int, seed: int) -> Array:
    if source == "exact":
        e = np.zeros(op.dim_in)
        diag = np.empty(op.dim_in)
        for j in range(op.dim_in):
            e[j] = 1.0
            diag[j] = op.matvec(e)[j]
            e[j] = 0.0
        return diag
    if source == "estimator":
        return xdiag(op, budget, seed)
    raise ValueError("diag source must be 'exact' or 'estimator'")


def fisher_merge(
    task_params: Sequence[Array],
    fisher_ops: Sequence[LinearOperator],
    damping: float,
    mode: str = "full",
    cg_rtol: float = 1e-10,
    cg_maxiter: Optional[int] = None,
    diag_source: str = "exact",
    diag_budget: int = 64,
    seed: int = 0,
) -> Array:
    """Fisher-weighted average of task parameters.

    full mode solves ``(sum_t F_t + damping I) theta = sum_t F_t theta_t``
    with CG; diagonal mode weights coordinates by (estimated or exact) Fisher
    diagonals. Tasks are canonically ordered internally, so the result is
    bit-identical under task permutations.
    """
    if damping <= 0.0:
        raise ValueError("merging requires positive damping (Fishers may be singular)")
    if len(task_params) != len(fisher_ops) or not task_params:
        raise ValueError("need one Fisher operator per parameter vector")
    thetas = [np.asarray(t, dtype=np.float64) for t in task_params]
    dim = thetas[0].shape[0]
    if any(t.shape != (dim,) for t in thetas) or any(o.dim_in != dim for o in fisher_ops):
        raise ValueError("all tasks must share the parameter dimension")
    order = np.lexsort(np.stack(thetas)[:, ::-1].T)
    thetas = [thetas[i] for i in order]
    ops = [fisher_ops[i] for i in order]
    if mode == "diagonal":
        diags = [_operator_diagonal(o, diag_source, diag_budget, seed) for o in ops]
        num = sum(d * t for d, t in zip(diags, thetas))
        den = sum(diags) + damping
        return num / den
    if mode != "full":
        raise ValueError("mode must be 'full' or 'diagonal'")
    rhs = np.zeros(dim)
    for o, t in zip(ops, thetas):
        rhs += o.matvec(t)

    def total(v):
        out = damping * v
        for o in ops:
            out = out + o.matvec(v)
        return out

    merged, report = cg_solve(
        FunctionOperator(total, dim, symmetric=True), rhs, rtol=cg_rtol, maxiter=cg_maxiter
    )
    return merged


@dataclass
class PruneScore:
    """Saliency of zeroing each parameter, higher = more loss increase."""

    indices: Array
    scores: Array
    deltas: Optional[Array]  # (n_indices, dim) full-mode update vectors
    invalid: Array  # indices whose inverse-diagonal came out non-positive


def prune_scores(
    risk: RiskSpec,
    params,
    data: Dataset,
    mode: str = "diagonal",
    damping: float = 1e-3,
    indices: Optional[Sequence[int]] = None,
    diag_source: str = "exact",
    diag_budget: int = 64,
    batching: Batching = None,
    cg_rtol: float = 1e-10,
    seed: int = 0,
    with_deltas: bool = False,
) -> PruneScore:
    """Loss-increase saliencies for zeroing single parameters.

    diagonal mode scores ``theta_i^2 * h_ii / 2`` using the diagonal
    approximation ``[H^{-1}]_ii ~ 1/h_ii``. full mode solves
    ``(H + damping I) z = e_i`` per index and scores
    ``theta_i^2 / (2 [((H + damping I))^{-1}]_ii)``, optionally with the full
    update vectors ``delta(i) = -theta_i z / z_i``. The inverse diagonal can
    also come from a randomized estimate on the inverse operator.
    """
    op = HessianOperator(risk, params, data, batching)
    theta = op.adapter.flatten(op.params)
    dim = theta.shape[0]
    idx = np.arange(dim) if indices is None else np.asarray(list(indices), dtype=np.int64)
    if mode == "diagonal":
        h_diag = _operator_diagonal(op, diag_source, diag_budget, seed)[idx]
        scores = 0.5 * theta[idx] ** 2 * h_diag
        return PruneScore(idx, scores, None, np.zeros(0, dtype=np.int64))
    if mode != "full":
        raise ValueError("mode must be 'diagonal' or 'full'")
    if damping <= 0.0:
        raise ValueError("full mode needs positive damping")
    damped = shift(op, damping)
    scores = np.empty(idx.size)
    deltas = np.zeros((idx.size, dim)) if with_deltas else None
    invalid = []
    if diag_source == "estimator" and not with_deltas:
        inverse_op = FunctionOperator(
            lambda v: cg_solve(damped, v, rtol=cg_rtol)[0], dim, symmetric=True
        )
        inv_diag = xdiag(inverse_op, diag_budget, seed)[idx]
        for row, i in enumerate(idx):
            if inv_diag[row] <= 0.0:
                invalid.append(i)
                scores[row] = np.nan
            else:
                scores[row] = 0.5 * theta[i] ** 2 / inv_diag[row]
        return PruneScore(idx, scores, None, np.asarray(invalid, dtype=np.int64))
    e = np.zeros(dim)
    for row, i in enumerate(idx):
        e[i] = 1.0
        z, _ = cg_solve(damped, e, rtol=cg_rtol)
        e[i] = 0.0
        zii = z[i]
        if zii <= 0.0:
            invalid.append(i)
            scores[row] = np.nan
            continue
        scores[row] = 0.5 * theta[i] ** 2 / zii
        if with_deltas:
            deltas[row] = -theta[i] * z / zii
    return PruneScore(idx, scores, deltas, np.asarray(invalid, dtype=np.int64))


def eigenspace_overlap(
    risk: RiskSpec,
    params,
    data: Dataset,
    k: int,
    eig_tol: float = 1e-8,
    batching: Batching = None,
    seed: int = 0,
) -> float:
    """Fraction of the squared gradient norm inside the Hessian's top-k
    eigenspace; a value in [0, 1]."""
    op = HessianOperator(risk, params, data, batching)
    if not 0 < k < op.dim_in:
        raise ValueError("need 0 < k < parameter dimension")
    g = op.risk_gradient()
    gnorm = float(g @ g)
    if gnorm == 0.0:
        warnings.warn("gradient is zero; overlap defined as 0", RuntimeWarning)
        return 0.0
    _, vecs = eigsh_topk(op, k, tol=eig_tol, seed=seed)
    proj = vecs.T @ g
    return float(proj @ proj) / gnorm
