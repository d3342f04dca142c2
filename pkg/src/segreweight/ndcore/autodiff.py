"""Reverse- and forward-mode differentiation over numpy-backed values.

A traced value is a :class:`Var`.  Primitives accept plain arrays or Vars; when
no Var is involved they simply compute, so model code has one code path for
evaluation, gradients and Jacobian-vector products.

Forward mode is eager (dual-number style): every Var may carry a tangent, and
each primitive pushes tangents through as it computes.  Reverse mode records
parent links and sweeps them once in reverse topological order.
"""
from __future__ import annotations

from typing import Any, Callable, Mapping

import numpy as np

from ..errors import ContractError, NumericalError


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "tangent", "requires_grad", "parents", "prim", "ctx")

    def __init__(self, value, tangent=None, requires_grad=False, parents=(), prim=None, ctx=None):
        self.value = value
        self.tangent = tangent
        self.requires_grad = requires_grad
        self.parents = parents
        self.prim = prim
        self.ctx = ctx

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        op = self.prim.name if self.prim is not None else "leaf"
        return f"Var(shape={self.value.shape}, op={op})"

    # Arithmetic sugar; the heavy lifting lives in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Primitive:
    """Base class for differentiable operations.

    Subclasses implement ``forward(*values, **kw) -> (out, ctx)``,
    ``vjp(ctx, g, needs) -> tuple`` and ``jvp(ctx, *tangents) -> tangent``.
    In ``jvp`` a tangent of ``None`` stands for an exact zero.
    """

    name = "primitive"

    def forward(self, *values, **kw):
        raise NotImplementedError

    def vjp(self, ctx, g, needs):
        raise NotImplementedError

    def jvp(self, ctx, *tangents):
        raise NotImplementedError


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _check_finite(arr, prim_name, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(prim_name, what)


def apply(prim: Primitive, *inputs, **kw):
    values = [value_of(x) for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, ctx = prim.forward(*values, **kw)
    _check_finite(out, prim.name, "forward")
    vars_in = [x for x in inputs if isinstance(x, Var)]
    if not vars_in:
        return out

    tangent = None
    if any(v.tangent is not None for v in vars_in):
        tangents = [x.tangent if isinstance(x, Var) else None for x in inputs]
        tangent = prim.jvp(ctx, *tangents)
        if tangent is not None:
            _check_finite(tangent, prim.name, "tangent")

    requires_grad = any(v.requires_grad for v in vars_in)
    if requires_grad:
        return Var(out, tangent, True, tuple(inputs), prim, ctx)
    return Var(out, tangent)


def _topological_order(root: Var) -> list[Var]:
    """Nodes reachable from ``root`` (requiring grad), parents before children."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if isinstance(p, Var) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, leaves: list[Var], seed=None) -> list[np.ndarray]:
    """Reverse sweep from ``root``; returns gradients for ``leaves`` (zeros if unreachable)."""
    if seed is None:
        if root.value.size != 1:
            raise ContractError("backward without an explicit seed needs a scalar output")
        seed = np.ones_like(root.value)
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaf_ids = {id(v) for v in leaves}
    kept: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in leaf_ids:
            kept[id(node)] = g
        if node.prim is None:
            continue
        needs = tuple(isinstance(p, Var) and p.requires_grad for p in node.parents)
        in_grads = node.prim.vjp(node.ctx, g, needs)
        for p, need, gp in zip(node.parents, needs, in_grads):
            if not need or gp is None:
                continue
            _check_finite(gp, node.prim.name, "gradient")
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return [kept.get(id(v), np.zeros_like(v.value)) for v in leaves]


# --- structure helpers: params may be a single array or a name->array mapping

def _flatten(params):
    if isinstance(params, Mapping):
        return list(params.keys()), [np.asarray(v) for v in params.values()]
    return None, [np.asarray(params)]


def _unflatten(keys, arrays):
    if keys is None:
        return arrays[0]
    return dict(zip(keys, arrays))


def value_and_grad(f: Callable[[Any], Any], params):
    """Evaluate scalar ``f(params)`` and its gradient with respect to ``params``."""
    keys, arrays = _flatten(params)
    leaves = [Var(a, requires_grad=True) for a in arrays]
    out = f(_unflatten(keys, leaves))
    if not isinstance(out, Var):
        # f does not depend on params: constant function
        value = np.asarray(out)
        return value, _unflatten(keys, [np.zeros_like(a) for a in arrays])
    if out.value.size != 1:
        raise ContractError(f"grad needs a scalar-valued function, got shape {out.value.shape}")
    grads = backward(out, leaves)
    return out.value, _unflatten(keys, grads)


def grad(f: Callable[[Any], Any], params):
    """Gradient of scalar ``f`` at ``params``, shaped like ``params``."""
    return value_and_grad(f, params)[1]


def jvp(f: Callable[[Any], Any], params, tangent, return_value=False):
    """Directional derivative of ``f`` at ``params`` along ``tangent``.

    Returns an array shaped like ``f``'s output (and the primal output when
    ``return_value`` is set).
    """
    keys, arrays = _flatten(params)
    tkeys, tarrays = _flatten(tangent)
    if keys != tkeys or len(arrays) != len(tarrays):
        raise ContractError("tangent structure does not mirror params")
    for a, t in zip(arrays, tarrays):
        if a.shape != t.shape:
            raise ContractError(f"tangent shape {t.shape} does not match param shape {a.shape}")
    leaves = [Var(a, tangent=np.asarray(t, dtype=a.dtype)) for a, t in zip(arrays, tarrays)]
    out = f(_unflatten(keys, leaves))
    if isinstance(out, Var):
        value, t = out.value, out.tangent
        if t is None:
            t = np.zeros_like(value)
    else:
        value = np.asarray(out)
        t = np.zeros_like(value)
    return (value, t) if return_value else t
