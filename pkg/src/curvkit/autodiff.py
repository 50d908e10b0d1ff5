"""Minimal reverse/forward-mode automatic differentiation over float64 numpy arrays.

Two carriers cooperate:

* :class:`Var` is a reverse-mode tape node. Its backward rules are written in
  terms of the same traceable primitives, so differentiating through a
  backward pass (reverse-over-reverse, e.g. for Hessian-vector products) just
  works.
* :class:`Dual` is a forward-mode dual number (primal, tangent). Every
  primitive also propagates tangents, and a ``Var`` may hold a ``Dual`` value,
  which yields forward-over-reverse composition.

Only the primitives needed for small dense networks are provided: elementwise
arithmetic, 2-d matmul/transpose, reductions, broadcasting, exp/log, and the
relu/sigmoid/tanh activations. All arithmetic is in 64-bit floats; evaluation
is deterministic (identical inputs give bit-identical outputs).
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

Array = np.ndarray
Value = Union[Array, float, "Dual"]


class Dual:
    """Forward-mode carrier: primal value plus directional tangent."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual(primal={self.primal!r}, tangent={self.tangent!r})"


class Var:
    """Reverse-mode tape node: a value plus backward rules to its parents."""

    __slots__ = ("value", "parents", "rules")

    def __init__(self, value, parents=(), rules=()):
        self.value = value
        self.parents = parents
        self.rules = rules

    def __repr__(self):
        return f"Var(value={self.value!r}, n_parents={len(self.parents)})"


def val(x):
    """Strip a Var wrapper (the result may still be a Dual)."""
    return x.value if isinstance(x, Var) else x


def primal(x):
    """Fully unwrap to the underlying numpy value."""
    x = val(x)
    return x.primal if isinstance(x, Dual) else x


def shape(x):
    return np.shape(primal(x))


def _parts(x):
    """Split into (primal-ish, tangent-or-None) for Dual dispatch."""
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return x, None


def _is_var(*args):
    return any(isinstance(a, Var) for a in args)


def _is_dual(*args):
    return any(isinstance(a, Dual) for a in args)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    if _is_var(a, b):
        parents, rules = [], []
        if isinstance(a, Var):
            sa = shape(a)
            parents.append(a)
            rules.append(lambda g: unbroadcast(g, sa))
        if isinstance(b, Var):
            sb = shape(b)
            parents.append(b)
            rules.append(lambda g: unbroadcast(g, sb))
        return Var(add(val(a), val(b)), tuple(parents), tuple(rules))
    if _is_dual(a, b):
        ap, at = _parts(a)
        bp, bt = _parts(b)
        if at is None:
            tan = bt
        elif bt is None:
            tan = at
        else:
            tan = add(at, bt)
        return Dual(add(ap, bp), tan)
    return np.add(a, b)


def neg(a):
    if isinstance(a, Var):
        return Var(neg(a.value), (a,), (lambda g: neg(g),))
    if isinstance(a, Dual):
        return Dual(neg(a.primal), neg(a.tangent))
    return np.negative(a)


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    if _is_var(a, b):
        parents, rules = [], []
        if isinstance(a, Var):
            sa = shape(a)
            parents.append(a)
            rules.append(lambda g, b=b: unbroadcast(mul(g, b), sa))
        if isinstance(b, Var):
            sb = shape(b)
            parents.append(b)
            rules.append(lambda g, a=a: unbroadcast(mul(g, a), sb))
        return Var(mul(val(a), val(b)), tuple(parents), tuple(rules))
    if _is_dual(a, b):
        ap, at = _parts(a)
        bp, bt = _parts(b)
        if at is None:
            tan = mul(ap, bt)
        elif bt is None:
            tan = mul(at, bp)
        else:
            tan = add(mul(at, bp), mul(ap, bt))
        return Dual(mul(ap, bp), tan)
    return np.multiply(a, b)


def div(a, b):
    if _is_var(a, b):
        parents, rules = [], []
        if isinstance(a, Var):
            sa = shape(a)
            parents.append(a)
            rules.append(lambda g, b=b: unbroadcast(div(g, b), sa))
        if isinstance(b, Var):
            sb = shape(b)
            parents.append(b)
            rules.append(
                lambda g, a=a, b=b: unbroadcast(neg(div(mul(g, a), mul(b, b))), sb)
            )
        return Var(div(val(a), val(b)), tuple(parents), tuple(rules))
    if _is_dual(a, b):
        ap, at = _parts(a)
        bp, bt = _parts(b)
        if bt is None:
            return Dual(div(ap, bp), div(at, bp))
        if at is None:
            tan = neg(div(mul(ap, bt), mul(bp, bp)))
        else:
            tan = div(sub(mul(at, bp), mul(ap, bt)), mul(bp, bp))
        return Dual(div(ap, bp), tan)
    return np.divide(a, b)


def matmul(a, b):
    """Matrix product of two 2-d operands."""
    if _is_var(a, b):
        parents, rules = [], []
        if isinstance(a, Var):
            parents.append(a)
            rules.append(lambda g, b=b: matmul(g, transpose(b)))
        if isinstance(b, Var):
            parents.append(b)
            rules.append(lambda g, a=a: matmul(transpose(a), g))
        return Var(matmul(val(a), val(b)), tuple(parents), tuple(rules))
    if _is_dual(a, b):
        ap, at = _parts(a)
        bp, bt = _parts(b)
        if at is None:
            tan = matmul(ap, bt)
        elif bt is None:
            tan = matmul(at, bp)
        else:
            tan = add(matmul(at, bp), matmul(ap, bt))
        return Dual(matmul(ap, bp), tan)
    return np.matmul(a, b)


def transpose(a):
    if isinstance(a, Var):
        return Var(transpose(a.value), (a,), (lambda g: transpose(g),))
    if isinstance(a, Dual):
        return Dual(transpose(a.primal), transpose(a.tangent))
    return np.swapaxes(a, -1, -2)


def reshape(a, new_shape):
    if isinstance(a, Var):
        old = shape(a)
        return Var(
            reshape(a.value, new_shape), (a,), (lambda g: reshape(g, old),)
        )
    if isinstance(a, Dual):
        return Dual(reshape(a.primal, new_shape), reshape(a.tangent, new_shape))
    return np.reshape(a, new_shape)


def broadcast_to(a, new_shape):
    if isinstance(a, Var):
        old = shape(a)
        return Var(
            broadcast_to(a.value, new_shape), (a,), (lambda g: unbroadcast(g, old),)
        )
    if isinstance(a, Dual):
        return Dual(
            broadcast_to(a.primal, new_shape), broadcast_to(a.tangent, new_shape)
        )
    return np.broadcast_to(a, new_shape)


def sum_(a, axis=None, keepdims=False):
    if isinstance(a, Var):
        old = shape(a)

        def rule(g, axis=axis, keepdims=keepdims, old=old):
            if axis is None:
                g = reshape(g, (1,) * len(old))
            elif not keepdims:
                kept = list(shape(g))
                for ax in sorted(_axes(axis, len(old))):
                    kept.insert(ax, 1)
                g = reshape(g, tuple(kept))
            return broadcast_to(g, old)

        return Var(sum_(a.value, axis, keepdims), (a,), (rule,))
    if isinstance(a, Dual):
        return Dual(sum_(a.primal, axis, keepdims), sum_(a.tangent, axis, keepdims))
    return np.sum(a, axis=axis, keepdims=keepdims)


def _axes(axis, ndim):
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def unbroadcast(g, target_shape):
    """Reduce ``g`` back to ``target_shape`` after numpy broadcasting."""
    gshape = shape(g)
    if gshape == tuple(target_shape):
        return g
    while len(shape(g)) > len(target_shape):
        g = sum_(g, axis=0)
    for ax, size in enumerate(target_shape):
        if size == 1 and shape(g)[ax] != 1:
            g = sum_(g, axis=ax, keepdims=True)
    return g


def exp(a):
    if isinstance(a, Var):
        out = Var(exp(a.value), (a,), ())
        out.rules = (lambda g: mul(g, out),)
        return out
    if isinstance(a, Dual):
        p = exp(a.primal)
        return Dual(p, mul(a.tangent, p))
    return np.exp(a)


def log(a):
    if isinstance(a, Var):
        return Var(log(a.value), (a,), (lambda g: div(g, a),))
    if isinstance(a, Dual):
        return Dual(log(a.primal), div(a.tangent, a.primal))
    return np.log(a)


def relu(a):
    # subgradient convention: derivative is 0 at the kink, second derivative
    # is 0 everywhere
    if isinstance(a, Var):
        mask = (primal(a) > 0).astype(np.float64)
        return Var(relu(a.value), (a,), (lambda g: mul(g, mask),))
    if isinstance(a, Dual):
        mask = (a.primal > 0).astype(np.float64)
        return Dual(mul(a.primal, mask), mul(a.tangent, mask))
    return np.maximum(a, 0.0)


def _sigmoid_nd(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    if isinstance(a, Var):
        out = Var(sigmoid(a.value), (a,), ())
        out.rules = (lambda g: mul(g, mul(out, sub(1.0, out))),)
        return out
    if isinstance(a, Dual):
        p = sigmoid(a.primal)
        return Dual(p, mul(a.tangent, mul(p, sub(1.0, p))))
    return _sigmoid_nd(np.asarray(a, dtype=np.float64))


def tanh(a):
    if isinstance(a, Var):
        out = Var(tanh(a.value), (a,), ())
        out.rules = (lambda g: mul(g, sub(1.0, mul(out, out))),)
        return out
    if isinstance(a, Dual):
        p = tanh(a.primal)
        return Dual(p, mul(a.tangent, sub(1.0, mul(p, p))))
    return np.tanh(a)


def logsumexp(a, axis=-1):
    """Row-wise log-sum-exp, stabilized with a constant shift.

    The shift is treated as a constant, so first and second derivatives equal
    those of the unshifted expression exactly.
    """
    m = np.max(primal(a), axis=axis, keepdims=True)
    e = exp(sub(a, m))
    return add(log(sum_(e, axis=axis)), np.squeeze(m, axis=axis))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, wrt: Sequence[Var], seed=None) -> list:
    """Accumulate adjoints of ``root`` with respect to the nodes in ``wrt``.

    ``seed`` is the adjoint of ``root`` itself (defaults to ones). Returned
    adjoints may be plain arrays, Vars (when the backward pass was traced
    through other Vars), or Duals (when the graph holds dual values); entries
    are ``None`` for nodes that do not influence ``root``.
    """
    results: list = [None] * len(wrt)
    if not isinstance(root, Var):
        return results
    if seed is None:
        seed = np.ones(shape(root))
    wanted: dict[int, list[int]] = {}
    for i, w in enumerate(wrt):
        wanted.setdefault(id(w), []).append(i)
    order = _toposort(root)
    adjoint = {id(root): seed}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        for i in wanted.get(id(node), ()):
            results[i] = g
        for parent, rule in zip(node.parents, node.rules):
            contribution = rule(g)
            held = adjoint.get(id(parent))
            adjoint[id(parent)] = (
                contribution if held is None else add(held, contribution)
            )
    return results


def grad_arrays(root, wrt: Sequence[Var], seed=None) -> list[Array]:
    """Like :func:`backward` but unwrap adjoints to numpy arrays (zeros where
    the node is unreached)."""
    out = []
    for w, g in zip(wrt, backward(root, wrt, seed)):
        if g is None:
            out.append(np.zeros(shape(w)))
        else:
            out.append(np.asarray(primal(g), dtype=np.float64))
    return out
