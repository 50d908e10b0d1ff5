"""Empirical risk over a dataset: evaluation, gradients, and loss derivatives.

The risk of parameters ``theta`` is ``R * sum_n loss(f(x_n), y_n)`` where the
reduction factor ``R`` is 1 (sum), 1/N (mean), or 1/(N*dim_f)
(mean-per-element) and is always computed from the *full* dataset size, never
from a batch. Batched evaluation rescales each batch so that any disjoint
partition of the data yields the same value.

Loss conventions (fixed once, everything downstream is consistent with them):

* ``mse``: ``loss(f, y) = ||f - y||^2`` (no 1/2), so the loss Hessian in the
  output is ``2 I``. The matching likelihood is a Gaussian with mean ``f`` and
  variance 1/2 per output coordinate; sampled labels use that variance.
* ``cross_entropy``: softmax cross-entropy on integer class labels,
  ``loss(f, y) = logsumexp(f) - f[y]``; the likelihood is the softmax
  categorical distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .model import Model, check_finite, trace_forward, validate_params

Array = np.ndarray

LOSS_KINDS = ("mse", "cross_entropy")
REDUCTION_KINDS = ("sum", "mean", "mean_per_element")

# Gaussian likelihood variance matching the ||f-y||^2 convention
GAUSSIAN_VARIANCE = 0.5


@dataclass(frozen=True)
class LossSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unsupported loss {self.kind!r}")

    @property
    def classification(self) -> bool:
        return self.kind == "cross_entropy"


@dataclass(frozen=True)
class Reduction:
    kind: str

    def __post_init__(self):
        if self.kind not in REDUCTION_KINDS:
            raise ValueError(f"unsupported reduction {self.kind!r}")

    def factor(self, n_data: int, dim_out: int) -> float:
        if n_data < 1:
            raise ValueError("reduction factor needs at least one datum")
        if self.kind == "sum":
            return 1.0
        if self.kind == "mean":
            return 1.0 / n_data
        return 1.0 / (n_data * dim_out)


class Dataset:
    """Immutable inputs/targets pair; targets are class indices or arrays."""

    def __init__(self, x: Array, y: Array):
        x = check_finite(x, "x")
        if x.ndim != 2:
            raise ValueError("x must be (N, dim_in)")
        y = np.asarray(y)
        if np.issubdtype(y.dtype, np.integer):
            if y.ndim != 1:
                raise ValueError("class labels must be a 1-d integer array")
            y = y.astype(np.int64)
        else:
            y = check_finite(y, "y")
            if y.ndim != 2:
                raise ValueError("regression targets must be (N, dim_out)")
        if y.shape[0] != x.shape[0]:
            raise ValueError("x and y row counts differ")
        x.setflags(write=False)
        y.setflags(write=False)
        self.x = x
        self.y = y

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def classification(self) -> bool:
        return np.issubdtype(self.y.dtype, np.integer)


@dataclass(frozen=True)
class Batch:
    x: Array
    y: Array
    indices: Array  # positions within the full dataset


def take_batch(data: Dataset, idx: Array) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    return Batch(data.x[idx], data.y[idx], idx)


Batching = Union[None, int, Sequence[Sequence[int]]]


def make_batches(n: int, batching: Batching = None) -> tuple[Array, ...]:
    """Normalize a batching request to a disjoint index partition of range(n)."""
    if n < 1:
        raise ValueError("dataset must be nonempty")
    if batching is None:
        return (np.arange(n, dtype=np.int64),)
    if isinstance(batching, (int, np.integer)):
        if batching < 1:
            raise ValueError("batch size must be positive")
        return tuple(
            np.arange(lo, min(lo + batching, n), dtype=np.int64)
            for lo in range(0, n, batching)
        )
    parts = tuple(np.asarray(p, dtype=np.int64) for p in batching)
    if any(p.size == 0 for p in parts):
        raise ValueError("empty batch in partition")
    flat = np.concatenate(parts)
    if flat.size != n or np.unique(flat).size != n or flat.min() < 0 or flat.max() >= n:
        raise ValueError("batches must disjointly cover the dataset")
    return parts


@dataclass(frozen=True)
class RiskSpec:
    """The empirical-risk definition: architecture, criterion, reduction."""

    model: Model
    loss: LossSpec
    reduction: Reduction

    def check_data(self, data: Dataset) -> None:
        if data.x.shape[1] != self.model.dim_in:
            raise ValueError("dataset input dim does not match model")
        if self.loss.classification:
            if not data.classification:
                raise ValueError("cross-entropy needs integer class labels")
            if data.y.size and data.y.max() >= self.model.dim_out:
                raise ValueError("class index out of range")
            if data.y.size and data.y.min() < 0:
                raise ValueError("negative class index")
        else:
            if data.classification:
                raise ValueError("mse needs array targets")
            if data.y.shape[1] != self.model.dim_out:
                raise ValueError("target dim does not match model output")


def softmax(f: Array) -> Array:
    f = np.asarray(f, dtype=np.float64)
    m = f.max(axis=-1, keepdims=True)
    e = np.exp(f - m)
    return e / e.sum(axis=-1, keepdims=True)


def _onehot(y: Array, dim: int) -> Array:
    out = np.zeros((y.shape[0], dim))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def batch_loss_sum(loss: LossSpec, f_node, y: Array):
    """Unreduced sum of per-datum losses; traceable when ``f_node`` is a Var."""
    if loss.kind == "mse":
        r = ad.sub(f_node, y)
        return ad.sum_(ad.mul(r, r))
    lse = ad.sum_(ad.logsumexp(f_node, axis=1))
    picked = ad.sum_(ad.mul(f_node, _onehot(y, ad.shape(f_node)[1])))
    return ad.sub(lse, picked)


def risk_eval(risk: RiskSpec, params, data: Dataset, batching: Batching = None) -> float:
    """Batched empirical risk; identical for any batch partition."""
    params = validate_params(risk.model, params)
    risk.check_data(data)
    r_full = risk.reduction.factor(data.n, risk.model.dim_out)
    total = 0.0
    for idx in make_batches(data.n, batching):
        batch = take_batch(data, idx)
        out, _ = trace_forward(risk.model, params, batch.x)
        raw = float(batch_loss_sum(risk.loss, out, batch.y))
        r_batch = risk.reduction.factor(idx.size, risk.model.dim_out)
        total += (r_full / r_batch) * (r_batch * raw)
    return total


def risk_gradient_list(
    risk: RiskSpec, params, data: Dataset, batching: Batching = None
) -> list[Array]:
    """Gradient of :func:`risk_eval` in parameter-list format."""
    params = validate_params(risk.model, params)
    risk.check_data(data)
    r_full = risk.reduction.factor(data.n, risk.model.dim_out)
    total = [np.zeros(s) for s in risk.model.param_shapes]
    for idx in make_batches(data.n, batching):
        batch = take_batch(data, idx)
        leaves = [ad.Var(p) for p in params]
        out, _ = trace_forward(risk.model, leaves, batch.x)
        raw = batch_loss_sum(risk.loss, out, batch.y)
        for acc, g in zip(total, ad.grad_arrays(raw, leaves)):
            acc += r_full * g
    return total


def risk_gradient(
    risk: RiskSpec, params, data: Dataset, batching: Batching = None
) -> Array:
    """Gradient of :func:`risk_eval` as a flat parameter vector."""
    return np.concatenate(
        [g.ravel() for g in risk_gradient_list(risk, params, data, batching)]
    )


def loss_output_gradient(loss: LossSpec, f: Array, y: Array) -> Array:
    """Per-datum gradient of the loss in the network output, batched ``(N, C)``."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    if loss.kind == "mse":
        return 2.0 * (f - np.atleast_2d(y))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return softmax(f) - _onehot(y, f.shape[1])


def loss_output_hessian(loss: LossSpec, f: Array, y=None) -> Array:
    """Hessian of the loss in one datum's output; independent of the label."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("loss_output_hessian takes a single prediction")
    c = f.shape[0]
    if loss.kind == "mse":
        return 2.0 * np.eye(c)
    p = softmax(f)
    return np.diag(p) - np.outer(p, p)


def loss_hessian_sqrt(loss: LossSpec, f: Array) -> Array:
    """Symmetric PSD square root S with S @ S == loss_output_hessian."""
    if loss.kind == "mse":
        return np.sqrt(2.0) * np.eye(f.shape[0])
    h = loss_output_hessian(loss, f)
    w, v = np.linalg.eigh(h)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sample_labels(loss: LossSpec, f: Array, count: int, seed) -> Array:
    """Draw i.i.d. labels from the likelihood q(y | f) for one datum.

    Returns ``(count, dim)`` Gaussians for mse, ``(count,)`` class indices for
    cross-entropy. Reproducible for a fixed seed (ints and int tuples both
    work as seeds).
    """
    if count < 1:
        raise ValueError("need at least one sample")
    f = np.asarray(f, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if loss.kind == "mse":
        return f + np.sqrt(GAUSSIAN_VARIANCE) * rng.standard_normal((count, f.shape[0]))
    cum = np.cumsum(softmax(f))
    draws = np.searchsorted(cum, rng.random(count), side="right")
    return np.clip(draws, 0, f.shape[0] - 1).astype(np.int64)


def datum_sample_stream(seed: int, datum_index: int):
    """Seed material for the per-datum label stream; independent of batching."""
    return (int(seed), int(datum_index))


# ---------------------------------------------------------------------------
# layer input / output-gradient capture (feeds the Kronecker factors)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrueLabels:
    """Backpropagate the loss gradient at the dataset labels."""


@dataclass(frozen=True)
class SampledLabels:
    """Backpropagate loss gradients at labels sampled from the likelihood."""

    count: int
    seed: int


@dataclass(frozen=True)
class HessianSqrt:
    """Backpropagate the columns of the loss-Hessian square root."""


GradientSource = Union[TrueLabels, SampledLabels, HessianSqrt]


@dataclass(frozen=True)
class LayerIO:
    layer_index: int
    inputs: Array  # (N, in+1) with bias augmentation, else (N, in)
    grads: Array  # (C, N, out): C backpropagated vectors per datum


@dataclass(frozen=True)
class LayerCapture:
    layers: tuple[LayerIO, ...]
    n: int
    source: GradientSource


def _capture_cotangents(
    loss: LossSpec, f: Array, batch: Batch, source: GradientSource
) -> Array:
    """Stack of (N, C_out) cotangent sets, one per backward pass."""
    n, c = f.shape
    if isinstance(source, TrueLabels):
        return loss_output_gradient(loss, f, batch.y)[None]
    if isinstance(source, SampledLabels):
        sets = np.zeros((source.count, n, c))
        for row, global_idx in enumerate(batch.indices):
            labels = sample_labels(
                loss, f[row], source.count, datum_sample_stream(source.seed, global_idx)
            )
            for s in range(source.count):
                sets[s, row] = loss_output_gradient(loss, f[row], labels[s])[0]
        return sets
    if isinstance(source, HessianSqrt):
        sets = np.zeros((c, n, c))
        for row in range(n):
            sqrt = loss_hessian_sqrt(loss, f[row])
            sets[:, row, :] = sqrt.T  # set j carries column j of the root
        return sets
    raise TypeError(f"unknown gradient source {source!r}")


def capture_layer_io(
    model: Model, params, loss: LossSpec, batch: Batch, source: GradientSource
) -> LayerCapture:
    """Record per-linear-layer inputs and backpropagated output gradients.

    Gradients are raw per-datum quantities (no reduction factor); callers
    apply their own scaling. The model must be deterministic and per-datum
    (fixture layers are rejected).
    """
    params = validate_params(model, params)
    leaves = [ad.Var(p) for p in params]
    out, traces = trace_forward(model, leaves, batch.x, require_pointwise=True)
    if not traces:
        raise ValueError("model has no parametric layers to capture")
    f = np.asarray(ad.primal(out))
    cotangents = _capture_cotangents(loss, f, batch, source)
    preacts = [t.preact for t in traces]
    per_layer_grads = [[] for _ in traces]
    for u in cotangents:
        adjoints = ad.backward(out, preacts, seed=u)
        for i, adj in enumerate(adjoints):
            per_layer_grads[i].append(np.asarray(ad.primal(adj)))
    layers = []
    for i, t in enumerate(traces):
        a = np.asarray(ad.primal(t.inputs))
        if t.layer.bias:
            a = np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)
        layers.append(LayerIO(t.layer_index, a, np.stack(per_layer_grads[i])))
    return LayerCapture(tuple(layers), batch.x.shape[0], source)
