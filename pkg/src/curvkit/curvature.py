"""Curvature matrices of the empirical risk as matrix-free linear operators.

All operators act on the flattened parameter space, aggregate over a fixed
batch partition with corrected scaling (so any partition of the data gives
the same product), and snapshot parameters and data at construction.

Matvec recipes:

* Hessian: nested reverse-mode AD, ``H v = d/dtheta (grad^T v)``.
* GGN: forward-mode ``J v``, multiply by the loss Hessian in the output,
  reverse-mode ``J^T (.)``.
* Monte-Carlo / empirical Fisher: same sandwich with the rank-one factor
  ``g g^T`` in the middle, where ``g`` is the loss gradient in the output at
  sampled labels (fresh per-datum streams seeded by datum index, so sampling
  is independent of the batching) or at the true labels. Per-datum gradients
  are never stored.
* Type-II Fisher: for both supported losses the loss Hessian in the output
  does not depend on the label, so the expectation over the model's
  likelihood is the loss Hessian itself and the operator coincides with the
  GGN. The delegation is exact, not an approximation.
* KFAC: per linear layer, an input second-moment factor A and an
  output-gradient second-moment factor B; products use the Kronecker identity
  ``(B (x) A) vec(V) = vec(B V A^T)`` without materializing the product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .linop import ParamFormatAdapter, ParamSpaceOperator
from .model import Model, trace_forward, validate_params
from .risk import (
    Batching,
    Dataset,
    HessianSqrt,
    RiskSpec,
    SampledLabels,
    TrueLabels,
    batch_loss_sum,
    capture_layer_io,
    datum_sample_stream,
    loss_output_gradient,
    make_batches,
    risk_eval,
    risk_gradient,
    sample_labels,
    softmax,
    take_batch,
)

Array = np.ndarray

CURVATURE_KINDS = ("hessian", "ggn", "mc-fisher", "emp-fisher", "type2-fisher", "kfac")


class CurvatureOperator(ParamSpaceOperator):
    """Shared plumbing: snapshots, batching, risk access."""

    def __init__(self, risk: RiskSpec, params, data: Dataset, batching: Batching = None):
        params = validate_params(risk.model, params)
        risk.check_data(data)
        adapter = ParamFormatAdapter(risk.model.param_shapes)
        super().__init__(adapter, symmetric=True)
        self.risk = risk
        self.params = [p.copy() for p in params]
        for p in self.params:
            p.setflags(write=False)
        self.data = data
        self.batches = make_batches(data.n, batching)
        self.r_full = risk.reduction.factor(data.n, risk.model.dim_out)

    # risk access (used by the determinism safeguard and the applications)
    def risk_value(self) -> float:
        return risk_eval(self.risk, self.params, self.data, self.batches)

    def risk_gradient(self) -> Array:
        return risk_gradient(self.risk, self.params, self.data, self.batches)

    def _extra_kwargs(self) -> dict:
        return {}

    def with_batching(self, batching: Batching) -> "CurvatureOperator":
        return type(self)(
            self.risk, self.params, self.data, batching, **self._extra_kwargs()
        )

    def with_shuffled_batching(self, seed: int) -> "CurvatureOperator":
        perm = np.random.default_rng(seed).permutation(self.data.n)
        parts, lo = [], 0
        for b in self.batches:
            parts.append(perm[lo : lo + b.size])
            lo += b.size
        return self.with_batching(tuple(parts))

    def _matvec(self, v: Array) -> Array:
        vl = self.adapter.unflatten(v)
        acc = [np.zeros(s) for s in self.risk.model.param_shapes]
        for idx in self.batches:
            batch = take_batch(self.data, idx)
            for a, c in zip(acc, self._batch_matvec(batch, vl)):
                a += c
        return self.adapter.flatten(acc)

    def _batch_matvec(self, batch, vl):  # pragma: no cover - abstract
        raise NotImplementedError


class HessianOperator(CurvatureOperator):
    """Exact risk Hessian via reverse-over-reverse AD."""

    def _batch_matvec(self, batch, vl):
        leaves = [ad.Var(p) for p in self.params]
        out, _ = trace_forward(self.risk.model, leaves, batch.x)
        raw = batch_loss_sum(self.risk.loss, out, batch.y)
        grads = ad.backward(raw, leaves)
        inner = None
        for g, t in zip(grads, vl):
            if g is None:
                continue
            term = ad.sum_(ad.mul(g, t))
            inner = term if inner is None else ad.add(inner, term)
        if not isinstance(inner, ad.Var):
            return [np.zeros(s) for s in self.risk.model.param_shapes]
        hv = ad.grad_arrays(inner, leaves)
        return [self.r_full * h for h in hv]


class _SandwichOperator(CurvatureOperator):
    """J^T M J products where M depends only on the batch outputs."""

    def _output_cotangent(self, f: Array, jv: Array, batch) -> Array:
        raise NotImplementedError

    def _batch_matvec(self, batch, vl):
        leaves = [ad.Var(p) for p in self.params]
        out, _ = trace_forward(self.risk.model, leaves, batch.x)
        f = np.asarray(ad.primal(out))
        duals = [ad.Dual(p, t) for p, t in zip(self.params, vl)]
        out_d, _ = trace_forward(self.risk.model, duals, batch.x)
        jv = np.asarray(ad.val(out_d).tangent)
        u = self._output_cotangent(f, jv, batch)
        return ad.grad_arrays(out, leaves, seed=self.r_full * u)


class GGNOperator(_SandwichOperator):
    """Generalized Gauss-Newton from partial linearization of loss o net."""

    def _output_cotangent(self, f, jv, batch):
        if self.risk.loss.kind == "mse":
            return 2.0 * jv
        p = softmax(f)
        return p * jv - p * np.sum(p * jv, axis=1, keepdims=True)


class Type2FisherOperator(GGNOperator):
    """Expected loss Hessian under the model's likelihood.

    For mse and softmax cross-entropy the loss Hessian in the output is
    label-independent, so the expectation drops and the operator equals the
    GGN exactly; products are bit-identical by construction.
    """


class EmpiricalFisherOperator(_SandwichOperator):
    """Un-centered per-datum gradient covariance at the true labels."""

    def _output_cotangent(self, f, jv, batch):
        g = loss_output_gradient(self.risk.loss, f, batch.y)
        return g * np.sum(g * jv, axis=1, keepdims=True)


class MCFisherOperator(_SandwichOperator):
    """Monte-Carlo Fisher with S would-be gradients per datum."""

    def __init__(self, risk, params, data, batching=None, n_samples: int = 1, seed: int = 0):
        if n_samples < 1:
            raise ValueError("need at least one MC sample")
        super().__init__(risk, params, data, batching)
        self.n_samples = int(n_samples)
        self.seed = int(seed)

    def _extra_kwargs(self):
        return {"n_samples": self.n_samples, "seed": self.seed}

    def _output_cotangent(self, f, jv, batch):
        u = np.zeros_like(f)
        for row, global_idx in enumerate(batch.indices):
            labels = sample_labels(
                self.risk.loss,
                f[row],
                self.n_samples,
                datum_sample_stream(self.seed, global_idx),
            )
            if self.risk.loss.kind == "mse":
                g = 2.0 * (f[row][None, :] - labels)
            else:
                g = softmax(f[row])[None, :] - np.eye(f.shape[1])[labels]
            u[row] = g.T @ (g @ jv[row]) / self.n_samples
        return u


def make_curvature(
    kind: str,
    risk: RiskSpec,
    params,
    data: Dataset,
    batching: Batching = None,
    n_samples: int = 1,
    seed: int = 0,
    kfac_flavor: str = "ggn",
) -> ParamSpaceOperator:
    """Build a curvature operator by name (the CLI's entry point)."""
    if kind == "hessian":
        return HessianOperator(risk, params, data, batching)
    if kind == "ggn":
        return GGNOperator(risk, params, data, batching)
    if kind == "type2-fisher":
        return Type2FisherOperator(risk, params, data, batching)
    if kind == "emp-fisher":
        return EmpiricalFisherOperator(risk, params, data, batching)
    if kind == "mc-fisher":
        return MCFisherOperator(risk, params, data, batching, n_samples, seed)
    if kind == "kfac":
        blocks = kfac_compute(
            risk, params, data, kfac_flavor, batching, n_samples=n_samples, seed=seed
        )
        return KFACOperator(blocks)
    raise ValueError(f"unknown curvature kind {kind!r}")


# ---------------------------------------------------------------------------
# KFAC
# ---------------------------------------------------------------------------

KFAC_FLAVORS = ("ggn", "type2", "mc", "empirical")


@dataclass(frozen=True)
class LayerBlock:
    """Kronecker factor pair of one linear layer.

    Under row-major flattening of the combined ``(out, in+1)`` weight-bias
    matrix the represented block is ``kron(b_factor, a_factor)``.
    """

    layer_index: int
    a_factor: Array  # (in+1, in+1) with bias, else (in, in)
    b_factor: Array  # (out, out)
    dim_in: int
    dim_out: int
    bias: bool

    @property
    def n_params(self) -> int:
        return self.dim_out * (self.dim_in + (1 if self.bias else 0))


@dataclass(frozen=True)
class KroneckerBlocks:
    blocks: tuple[LayerBlock, ...]
    adapter: ParamFormatAdapter
    flavor: str

    @property
    def dim(self) -> int:
        return self.adapter.dim


def kfac_compute(
    risk: RiskSpec,
    params,
    data: Dataset,
    flavor: str = "ggn",
    batching: Batching = None,
    n_samples: int = 1,
    seed: int = 0,
) -> KroneckerBlocks:
    """Accumulate the Kronecker factors over the dataset.

    The input factor is the batch-averaged second moment of the
    (bias-augmented) layer inputs, ``A = (1/N) sum_n a_n a_n^T``; the gradient
    factor absorbs the reduction factor and the flavor constants,
    ``B = R * sum_n sum_c g g^T`` (divided by the sample count for the MC
    flavor). This convention makes KFAC equal the exact block-diagonal GGN on
    deep linear networks and the gradient outer product on a single datum
    with the empirical flavor.
    """
    if flavor not in KFAC_FLAVORS:
        raise ValueError(f"unknown KFAC flavor {flavor!r}")
    params = validate_params(risk.model, params)
    risk.check_data(data)
    linear_layers = [(i, l) for i, l in enumerate(risk.model.layers) if l.parametric]
    if not linear_layers:
        raise ValueError("KFAC needs at least one linear layer")
    uncovered = [
        l.kind for l in risk.model.layers if not l.parametric and l.kind not in
        ("relu", "sigmoid", "tanh")
    ]
    if uncovered:
        raise ValueError(f"KFAC does not cover layer kinds {sorted(set(uncovered))}")
    if flavor in ("ggn", "type2"):
        source = HessianSqrt()
    elif flavor == "mc":
        source = SampledLabels(n_samples, seed)
    else:
        source = TrueLabels()
    a_acc = [
        np.zeros((l.dim_in + (1 if l.bias else 0),) * 2) for _, l in linear_layers
    ]
    b_acc = [np.zeros((l.dim_out, l.dim_out)) for _, l in linear_layers]
    for idx in make_batches(data.n, batching):
        batch = take_batch(data, idx)
        cap = capture_layer_io(risk.model, params, risk.loss, batch, source)
        for i, layer_io in enumerate(cap.layers):
            a_acc[i] += layer_io.inputs.T @ layer_io.inputs
            g = layer_io.grads.reshape(-1, layer_io.grads.shape[-1])
            b_acc[i] += g.T @ g
    r_full = risk.reduction.factor(data.n, risk.model.dim_out)
    scale_b = r_full / n_samples if flavor == "mc" else r_full
    blocks = []
    for (pos, layer), a, b in zip(linear_layers, a_acc, b_acc):
        a = a / data.n
        b = scale_b * b
        blocks.append(
            LayerBlock(
                layer_index=pos,
                a_factor=0.5 * (a + a.T),
                b_factor=0.5 * (b + b.T),
                dim_in=layer.dim_in,
                dim_out=layer.dim_out,
                bias=layer.bias,
            )
        )
    adapter = ParamFormatAdapter(risk.model.param_shapes)
    return KroneckerBlocks(tuple(blocks), adapter, flavor)


def _split_layer(block: LayerBlock, vl: list[Array], cursor: int):
    """Assemble the (out, in+1) V matrix for one layer from the param list."""
    w = vl[cursor]
    if block.bias:
        return np.concatenate([w, vl[cursor + 1][:, None]], axis=1), cursor + 2
    return w, cursor + 1


def _unsplit_layer(block: LayerBlock, y: Array):
    if block.bias:
        return [y[:, : block.dim_in], y[:, block.dim_in]]
    return [y]


def kfac_matvec(blocks: KroneckerBlocks, v: Array) -> Array:
    """Product with the block-diagonal Kronecker approximation."""
    vl = blocks.adapter.unflatten(v)
    out, cursor = [], 0
    for block in blocks.blocks:
        vmat, cursor = _split_layer(block, vl, cursor)
        y = block.b_factor @ vmat @ block.a_factor.T
        out.extend(_unsplit_layer(block, y))
    return blocks.adapter.flatten(out)


class KFACOperator(ParamSpaceOperator):
    def __init__(self, blocks: KroneckerBlocks):
        super().__init__(blocks.adapter, symmetric=True)
        self.blocks = blocks

    def _matvec(self, v):
        return kfac_matvec(self.blocks, v)


DAMPING_SCHEMES = ("heuristic", "exact")


@dataclass(frozen=True)
class DampingConfig:
    lam: float
    scheme: str = "exact"

    def __post_init__(self):
        if self.scheme not in DAMPING_SCHEMES:
            raise ValueError(f"unknown damping scheme {self.scheme!r}")
        if self.lam <= 0.0:
            raise ValueError("damping lambda must be positive for an inverse")


_PSD_TOL = 1e-10


def _check_psd(mat: Array, what: str) -> Array:
    w = np.linalg.eigvalsh(mat)
    floor = -_PSD_TOL * max(1.0, float(w[-1]))
    if w[0] < floor:
        raise ValueError(f"{what} is not positive semi-definite (min eig {w[0]:.3e})")
    return w


class KFACInverseOperator(ParamSpaceOperator):
    """Damped inverse of the Kronecker approximation.

    heuristic: per layer ``(A + pi sqrt(lam) I)^-1 (x) (B + sqrt(lam)/pi I)^-1``
    with ``pi = sqrt((tr A / dim A) / (tr B / dim B))``.
    exact: eigendecompose both factors and invert ``B (x) A + lam I`` through
    the joint eigenbasis.
    """

    def __init__(self, blocks: KroneckerBlocks, damping: DampingConfig):
        super().__init__(blocks.adapter, symmetric=True)
        self.blocks = blocks
        self.damping = damping
        self._prep = []
        for block in blocks.blocks:
            _check_psd(block.a_factor, f"layer {block.layer_index} input factor")
            _check_psd(block.b_factor, f"layer {block.layer_index} gradient factor")
            if damping.scheme == "heuristic":
                tr_a = np.trace(block.a_factor) / block.a_factor.shape[0]
                tr_b = np.trace(block.b_factor) / block.b_factor.shape[0]
                if tr_a <= 0.0 or tr_b <= 0.0:
                    raise ValueError("pi heuristic needs positive factor traces")
                pi = np.sqrt(tr_a / tr_b)
                rt = np.sqrt(damping.lam)
                a_inv = np.linalg.inv(
                    block.a_factor + pi * rt * np.eye(block.a_factor.shape[0])
                )
                b_inv = np.linalg.inv(
                    block.b_factor + (rt / pi) * np.eye(block.b_factor.shape[0])
                )
                self._prep.append(("heuristic", a_inv, b_inv))
            else:
                wa, qa = np.linalg.eigh(block.a_factor)
                wb, qb = np.linalg.eigh(block.b_factor)
                denom = np.outer(wb, wa) + damping.lam
                self._prep.append(("exact", qa, qb, denom))

    def _matvec(self, v):
        vl = self.adapter.unflatten(v)
        out, cursor = [], 0
        for block, prep in zip(self.blocks.blocks, self._prep):
            vmat, cursor = _split_layer(block, vl, cursor)
            if prep[0] == "heuristic":
                _, a_inv, b_inv = prep
                y = b_inv @ vmat @ a_inv.T
            else:
                _, qa, qb, denom = prep
                w = (qb.T @ vmat @ qa) / denom
                y = qb @ w @ qa.T
            out.extend(_unsplit_layer(block, y))
        return self.adapter.flatten(out)


def kfac_inverse_matvec(blocks: KroneckerBlocks, damping: DampingConfig, v: Array) -> Array:
    return KFACInverseOperator(blocks, damping).matvec(v)
