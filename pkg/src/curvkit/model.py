"""Feed-forward network descriptions and their differentiable evaluation.

A :class:`Model` is an ordered list of layer descriptors. Supported layers are
dense/linear (optional bias) and the elementwise relu/sigmoid/tanh
activations. Two additional layer kinds, ``noise`` and ``batchstat``, exist
solely as negative fixtures for the determinism safeguard: the first injects
fresh random noise on every evaluation, the second couples outputs across the
batch. They are rejected wherever deterministic per-datum semantics are
required.

Parameters travel as a list of float64 arrays, ``[W1, b1, W2, b2, ...]`` in
layer order (weights are ``(out, in)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

Array = np.ndarray

PARAMETRIC_KINDS = ("linear",)
ACTIVATION_KINDS = ("relu", "sigmoid", "tanh")
FIXTURE_KINDS = ("noise", "batchstat")


class UnsupportedLayerError(ValueError):
    """Raised when an operation cannot handle a layer kind."""


def check_finite(arr: Array, name: str) -> Array:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


@dataclass(frozen=True)
class Layer:
    kind: str
    dim_in: int
    dim_out: int
    bias: bool = True
    scale: float = 0.01  # only used by the "noise" fixture layer

    def __post_init__(self):
        if self.kind not in PARAMETRIC_KINDS + ACTIVATION_KINDS + FIXTURE_KINDS:
            raise UnsupportedLayerError(f"unknown layer kind {self.kind!r}")
        if self.dim_in <= 0 or self.dim_out <= 0:
            raise ValueError("layer dimensions must be positive")
        if self.kind != "linear" and self.dim_in != self.dim_out:
            raise ValueError(f"{self.kind} layer must preserve the dimension")

    @property
    def parametric(self) -> bool:
        return self.kind == "linear"

    @property
    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        if self.kind != "linear":
            return ()
        shapes = [(self.dim_out, self.dim_in)]
        if self.bias:
            shapes.append((self.dim_out,))
        return tuple(shapes)


def linear(dim_in: int, dim_out: int, bias: bool = True) -> Layer:
    return Layer("linear", dim_in, dim_out, bias)


def activation(kind: str, dim: int) -> Layer:
    return Layer(kind, dim, dim, bias=False)


@dataclass(frozen=True)
class Model:
    """An ordered stack of layers with composing dimensions."""

    layers: tuple[Layer, ...]

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if not layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.dim_out != nxt.dim_in:
                raise ValueError(
                    f"layer dims do not compose: {prev.dim_out} -> {nxt.dim_in}"
                )
        if not any(layer.parametric for layer in layers):
            raise ValueError("model needs at least one parametric layer")
        object.__setattr__(self, "layers", layers)

    @property
    def dim_in(self) -> int:
        return self.layers[0].dim_in

    @property
    def dim_out(self) -> int:
        return self.layers[-1].dim_out

    @property
    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(s for layer in self.layers for s in layer.param_shapes)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes)

    @property
    def deterministic(self) -> bool:
        return all(layer.kind != "noise" for layer in self.layers)

    @property
    def batch_independent(self) -> bool:
        return all(layer.kind != "batchstat" for layer in self.layers)


def validate_params(model: Model, params: Sequence) -> list[Array]:
    shapes = model.param_shapes
    if len(params) != len(shapes):
        raise ValueError(
            f"expected {len(shapes)} parameter tensors, got {len(params)}"
        )
    out = []
    for i, (p, s) in enumerate(zip(params, shapes)):
        p = check_finite(p, f"params[{i}]")
        if p.shape != s:
            raise ValueError(f"params[{i}] has shape {p.shape}, expected {s}")
        out.append(p)
    return out


def init_params(model: Model, seed: int = 0) -> list[Array]:
    """Random parameters, weights scaled by 1/sqrt(fan-in)."""
    rng = np.random.default_rng(seed)
    params = []
    for s in model.param_shapes:
        if len(s) == 2:
            params.append(rng.standard_normal(s) / np.sqrt(s[1]))
        else:
            params.append(0.1 * rng.standard_normal(s))
    return params


_ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "tanh": ad.tanh}


@dataclass
class LinearTrace:
    """Graph nodes recorded at one linear layer during a traced forward."""

    layer_index: int
    layer: Layer
    inputs: object  # node holding the (N, in) layer input
    preact: object  # node holding the (N, out) pre-activation output


def trace_forward(model: Model, params: Sequence, x: Array, require_pointwise=False):
    """Run the network on a batch, returning the output node and per-linear-layer traces.

    ``params`` entries may be numpy arrays, Vars, or Duals; the output carries
    whatever type propagates. ``x`` is a constant ``(N, dim_in)`` batch.
    """
    z = x
    traces: list[LinearTrace] = []
    idx = 0
    for layer_index, layer in enumerate(model.layers):
        if layer.kind == "linear":
            w = params[idx]
            idx += 1
            pre = ad.matmul(z, ad.transpose(w))
            if layer.bias:
                pre = ad.add(pre, params[idx])
                idx += 1
            traces.append(LinearTrace(layer_index, layer, z, pre))
            z = pre
        elif layer.kind in _ACTIVATIONS:
            z = _ACTIVATIONS[layer.kind](z)
        elif layer.kind == "noise":
            if require_pointwise:
                raise UnsupportedLayerError(
                    "noise layer is not supported in deterministic evaluation"
                )
            eps = layer.scale * np.random.default_rng().standard_normal(
                (np.shape(x)[0], layer.dim_out)
            )
            z = ad.add(z, eps)
        elif layer.kind == "batchstat":
            if require_pointwise:
                raise UnsupportedLayerError(
                    "batchstat layer couples data across the batch"
                )
            n = float(np.shape(x)[0])
            mean = ad.div(ad.sum_(z, axis=0, keepdims=True), n)
            z = ad.sub(z, mean)
        else:  # pragma: no cover - guarded in Layer.__post_init__
            raise UnsupportedLayerError(layer.kind)
    return z, traces


def _as_batch(x: Array) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError("input must be a vector or an (N, dim_in) batch")


def forward_eval(model: Model, params: Sequence, x: Array) -> Array:
    """Evaluate the network; a 1-d input gives a 1-d output."""
    params = validate_params(model, params)
    xb, single = _as_batch(check_finite(x, "x"))
    if xb.shape[1] != model.dim_in:
        raise ValueError(
            f"input dim {xb.shape[1]} does not match model dim {model.dim_in}"
        )
    out, _ = trace_forward(model, params, xb)
    out = np.asarray(ad.primal(out))
    return out[0] if single else out


def model_vjp(model: Model, params: Sequence, x: Array, cotangent: Array) -> list[Array]:
    """Transposed-Jacobian product J^T u of the network output w.r.t. params."""
    params = validate_params(model, params)
    xb, single = _as_batch(x)
    u = np.asarray(cotangent, dtype=np.float64)
    if single:
        u = u[None, :]
    leaves = [ad.Var(p) for p in params]
    out, _ = trace_forward(model, leaves, xb)
    if u.shape != ad.shape(out):
        raise ValueError(f"cotangent shape {u.shape} != output shape {ad.shape(out)}")
    return ad.grad_arrays(out, leaves, seed=u)


def model_jvp(model: Model, params: Sequence, x: Array, tangent: Sequence) -> Array:
    """Jacobian-vector product J v via forward-mode duals."""
    params = validate_params(model, params)
    tangent = validate_params(model, tangent)
    xb, single = _as_batch(x)
    duals = [ad.Dual(p, t) for p, t in zip(params, tangent)]
    out, _ = trace_forward(model, duals, xb)
    t = np.asarray(val_tangent(out))
    return t[0] if single else t


def val_tangent(node) -> Array:
    v = ad.val(node)
    if isinstance(v, ad.Dual):
        return np.asarray(v.tangent)
    return np.zeros(np.shape(v))
