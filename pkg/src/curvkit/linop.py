"""Matrix-free linear operators: application, lazy algebra, materialization.

An operator is the action ``v -> A v`` of a matrix that is never stored.
Operators are immutable once constructed; curvature operators snapshot their
parameters and data by value so that repeated products with the same vector
are bit-identical. Sums, scalar multiples, and diagonal shifts stay lazy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

Array = np.ndarray

DENSE_ENTRY_GUARD = 10**7


class LinearOperator:
    """Base class: a linear map given by its matrix-vector product."""

    def __init__(self, dim_in: int, dim_out: int, symmetric: bool = False):
        if dim_in < 1 or dim_out < 1:
            raise ValueError("operator dimensions must be positive")
        if symmetric and dim_in != dim_out:
            raise ValueError("symmetric operators must be square")
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self.symmetric = bool(symmetric)

    def _matvec(self, v: Array) -> Array:  # pragma: no cover - abstract
        raise NotImplementedError

    def matvec(self, v: Array) -> Array:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim_in,):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.dim_in},)")
        out = np.asarray(self._matvec(v), dtype=np.float64)
        if out.shape != (self.dim_out,):
            raise AssertionError("operator produced a wrong-sized result")
        return out

    __call__ = matvec

    def rmatvec(self, v: Array) -> Array:
        if self.symmetric:
            return self.matvec(v)
        raise NotImplementedError("transpose product only available for symmetric ops")

    def to_dense(self) -> Array:
        """Materialize column by column; the universal test oracle."""
        if self.dim_in * self.dim_out > DENSE_ENTRY_GUARD:
            raise ValueError(
                f"refusing to materialize {self.dim_out}x{self.dim_in} "
                f"(> {DENSE_ENTRY_GUARD} entries)"
            )
        out = np.empty((self.dim_out, self.dim_in))
        e = np.zeros(self.dim_in)
        for j in range(self.dim_in):
            e[j] = 1.0
            out[:, j] = self._matvec(e)
            e[j] = 0.0
        return out

    # lazy algebra ----------------------------------------------------------
    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        return add(self, other)

    def __mul__(self, alpha: float) -> "LinearOperator":
        return scale(self, alpha)

    __rmul__ = __mul__

    def __neg__(self) -> "LinearOperator":
        return scale(self, -1.0)

    def __sub__(self, other: "LinearOperator") -> "LinearOperator":
        return add(self, scale(other, -1.0))

    def shift(self, lam: float) -> "LinearOperator":
        return shift(self, lam)


class IdentityOperator(LinearOperator):
    def __init__(self, dim: int):
        super().__init__(dim, dim, symmetric=True)

    def _matvec(self, v):
        return v.copy()


class DiagonalOperator(LinearOperator):
    def __init__(self, diag: Array):
        diag = np.asarray(diag, dtype=np.float64).copy()
        diag.setflags(write=False)
        super().__init__(diag.size, diag.size, symmetric=True)
        self.diag = diag

    def _matvec(self, v):
        return self.diag * v


class DenseOperator(LinearOperator):
    def __init__(self, mat: Array, symmetric: Optional[bool] = None):
        mat = np.asarray(mat, dtype=np.float64).copy()
        if mat.ndim != 2:
            raise ValueError("dense operator needs a matrix")
        if symmetric is None:
            symmetric = mat.shape[0] == mat.shape[1] and np.array_equal(mat, mat.T)
        mat.setflags(write=False)
        super().__init__(mat.shape[1], mat.shape[0], symmetric=symmetric)
        self.mat = mat

    def _matvec(self, v):
        return self.mat @ v


class FunctionOperator(LinearOperator):
    """Wrap a plain callable as an operator (caller vouches for linearity)."""

    def __init__(self, fn, dim_in: int, dim_out: Optional[int] = None, symmetric=False):
        super().__init__(dim_in, dim_out if dim_out is not None else dim_in, symmetric)
        self._fn = fn

    def _matvec(self, v):
        return self._fn(v)


class _Sum(LinearOperator):
    def __init__(self, a: LinearOperator, b: LinearOperator):
        if (a.dim_in, a.dim_out) != (b.dim_in, b.dim_out):
            raise ValueError("operator dimensions do not match")
        super().__init__(a.dim_in, a.dim_out, symmetric=a.symmetric and b.symmetric)
        self.a, self.b = a, b

    def _matvec(self, v):
        return self.a._matvec(v) + self.b._matvec(v)


class _Scaled(LinearOperator):
    def __init__(self, a: LinearOperator, alpha: float):
        super().__init__(a.dim_in, a.dim_out, symmetric=a.symmetric)
        self.a, self.alpha = a, float(alpha)

    def _matvec(self, v):
        return self.alpha * self.a._matvec(v)


class _Shifted(LinearOperator):
    def __init__(self, a: LinearOperator, lam: float):
        if a.dim_in != a.dim_out:
            raise ValueError("can only shift square operators")
        super().__init__(a.dim_in, a.dim_out, symmetric=a.symmetric)
        self.a, self.lam = a, float(lam)

    def _matvec(self, v):
        return self.a._matvec(v) + self.lam * v


def add(a: LinearOperator, b: LinearOperator) -> LinearOperator:
    return _Sum(a, b)


def scale(a: LinearOperator, alpha: float) -> LinearOperator:
    return _Scaled(a, alpha)


def shift(a: LinearOperator, lam: float) -> LinearOperator:
    return _Shifted(a, lam)


# ---------------------------------------------------------------------------
# parameter formats
# ---------------------------------------------------------------------------


class ParamFormatAdapter:
    """Bijection between a list of parameter tensors and one flat vector.

    Flattening concatenates each tensor's row-major entries in layer order.
    """

    def __init__(self, shapes: Sequence[tuple[int, ...]]):
        self.shapes = tuple(tuple(s) for s in shapes)
        self.sizes = tuple(int(np.prod(s)) for s in self.shapes)
        self.dim = int(sum(self.sizes))
        offsets = np.cumsum((0,) + self.sizes)
        self.slices = tuple(
            slice(int(lo), int(hi)) for lo, hi in zip(offsets[:-1], offsets[1:])
        )

    def flatten(self, params: Sequence[Array]) -> Array:
        if len(params) != len(self.shapes):
            raise ValueError("wrong number of parameter tensors")
        for p, s in zip(params, self.shapes):
            if np.shape(p) != s:
                raise ValueError(f"tensor shape {np.shape(p)} != expected {s}")
        return np.concatenate([np.ravel(np.asarray(p, dtype=np.float64)) for p in params])

    def unflatten(self, vec: Array) -> list[Array]:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector shape {vec.shape} != ({self.dim},)")
        return [vec[sl].reshape(s) for sl, s in zip(self.slices, self.shapes)]


class ParamSpaceOperator(LinearOperator):
    """Square operator over a flattened parameter space; accepts both formats."""

    def __init__(self, adapter: ParamFormatAdapter, symmetric: bool = True):
        super().__init__(adapter.dim, adapter.dim, symmetric=symmetric)
        self.adapter = adapter

    def apply_paramlist(self, params: Sequence[Array]) -> list[Array]:
        return self.adapter.unflatten(self.matvec(self.adapter.flatten(params)))


# ---------------------------------------------------------------------------
# determinism safeguard
# ---------------------------------------------------------------------------


@dataclass
class DeterminismReport:
    passed: bool
    first_mismatch: Optional[str] = None
    max_differences: dict = field(default_factory=dict)

    def __bool__(self):
        return self.passed


def _pair_diff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))


def check_deterministic(
    op,
    probe_seed: int = 0,
    tol: float = 0.0,
    reshuffle_batches: bool = False,
    shuffle_seed: int = 1,
) -> DeterminismReport:
    """Probe an operator's risk value, gradient, and one matvec for stability.

    Each quantity is evaluated twice and the pairs must agree to ``tol``
    (default: exact bit equality). With ``reshuffle_batches`` the second
    evaluation runs on a permuted batch partition, which exposes
    data-order-dependent models; allow a small nonzero ``tol`` there since
    summation order legitimately changes. The report names the first
    mismatching quantity instead of raising.
    """
    rng = np.random.default_rng(probe_seed)
    v = rng.standard_normal(op.dim_in)
    twin = op.with_shuffled_batching(shuffle_seed) if reshuffle_batches else op
    suffix = " under reshuffled batching" if reshuffle_batches else ""
    checks = (
        ("risk value", lambda o: o.risk_value()),
        ("risk gradient", lambda o: o.risk_gradient()),
        ("matvec", lambda o: o.matvec(v)),
    )
    report = DeterminismReport(passed=True)
    for name, fn in checks:
        diff = _pair_diff(fn(op), fn(twin))
        report.max_differences[name] = diff
        if diff > tol and report.first_mismatch is None:
            report.passed = False
            report.first_mismatch = name + suffix
    return report
