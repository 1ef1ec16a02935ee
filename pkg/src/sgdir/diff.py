"""Reverse-mode differentiation over a closed set of array primitives.

A :class:`Tape` records every primitive eagerly (forward values are cached on
the nodes) and :meth:`Tape.backward` replays the record in reverse.  Values
are single precision by default; scalar reductions and window sums
accumulate in double precision.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import NotScalar, ShapeError, UnsupportedOp
from .grid import corner_offsets, flat_strides, linear_stencil


@dataclass
class ParamVector:
    """Flat parameter vector with named slices.

    ``layout`` maps a name to ``(offset, shape)``; slices are disjoint and
    cover ``values``.
    """
    values: np.ndarray
    layout: Dict[str, tuple]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        covered = sorted((off, off + int(np.prod(shape))) for off, shape in self.layout.values())
        pos = 0
        for lo, hi in covered:
            if lo != pos:
                raise ShapeError(f"layout leaves a gap or overlap at offset {pos}")
            pos = hi
        if pos != self.values.size:
            raise ShapeError(f"layout covers {pos} entries, vector has {self.values.size}")

    @classmethod
    def from_shapes(cls, shapes: Dict[str, tuple], values=None) -> "ParamVector":
        layout, off = {}, 0
        for name, shape in shapes.items():
            layout[name] = (off, tuple(shape))
            off += int(np.prod(shape))
        if values is None:
            values = np.zeros(off)
        return cls(values, layout)

    def __len__(self):
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), dict(self.layout))

    def copy(self) -> "ParamVector":
        return self.with_values(self.values)


class Node:
    __slots__ = ("tape", "index", "op", "value", "parents", "saved", "payload",
                 "requires_grad", "flat")

    def __init__(self, tape, index, op, value, parents, saved, payload, requires_grad):
        self.tape = tape
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.saved = saved
        self.payload = payload
        self.requires_grad = requires_grad
        self.flat = None

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        if self.value.size != 1:
            raise NotScalar(f"node of shape {self.value.shape} is not scalar")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        if isinstance(other, Node):
            return self.tape.record("add", [self, other])
        return self.tape.record("add_const", [self], const=other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.tape.record("sub", [self, other])
        return self.tape.record("add_const", [self], const=-other)

    def __rsub__(self, other):
        return self.tape.record("add_const", [self.tape.record("scale", [self], factor=-1.0)], const=other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.record("mul", [self, other])
        return self.tape.record("scale", [self], factor=other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return self.tape.record("div", [self, other])
        return self.tape.record("scale", [self], factor=1.0 / other)

    def __neg__(self):
        return self.tape.record("scale", [self], factor=-1.0)


# --- primitives -----------------------------------------------------------
# Each entry is (forward, vjp).  forward(*values, **payload) -> (out, saved);
# vjp(g, saved, needs, **payload) -> tuple of input adjoints (None where the
# input does not require a gradient).

_PRIMS: Dict[str, tuple] = {}


def _primitive(name):
    def register(pair):
        _PRIMS[name] = pair
        return pair
    return register


def _same_shape(op, *arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"{op}: shape mismatch {shape} vs {a.shape}")


def _add_fwd(a, b):
    _same_shape("add", a, b)
    return a + b, None


_primitive("add")((_add_fwd, lambda g, s, needs: (g, g)))


def _sub_fwd(a, b):
    _same_shape("sub", a, b)
    return a - b, None


_primitive("sub")((_sub_fwd, lambda g, s, needs: (g, -g)))


def _mul_fwd(a, b):
    _same_shape("mul", a, b)
    return a * b, (a, b)


def _mul_vjp(g, saved, needs):
    a, b = saved
    return (g * b if needs[0] else None, g * a if needs[1] else None)


_primitive("mul")((_mul_fwd, _mul_vjp))


def _div_fwd(a, b):
    _same_shape("div", a, b)
    return a / b, (a, b)


def _div_vjp(g, saved, needs):
    a, b = saved
    gb = g / b
    return (gb if needs[0] else None, -gb * a / b if needs[1] else None)


_primitive("div")((_div_fwd, _div_vjp))


def _scale_fwd(a, factor):
    return a * a.dtype.type(factor), None


_primitive("scale")((_scale_fwd, lambda g, s, needs, factor: (g * g.dtype.type(factor),)))


def _add_const_fwd(a, const):
    return a + a.dtype.type(const), None


_primitive("add_const")((_add_const_fwd, lambda g, s, needs, const: (g,)))


def _affine_fwd(w, x, b):
    if w.ndim != 2 or x.shape != (w.shape[1],) or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: W{w.shape} x{x.shape} b{b.shape}")
    return w @ x + b, (w, x)


def _affine_vjp(g, saved, needs):
    w, x = saved
    return (np.outer(g, x) if needs[0] else None,
            w.T @ g if needs[1] else None,
            g if needs[2] else None)


_primitive("affine")((_affine_fwd, _affine_vjp))


def _shifted(spatial, offset):
    return tuple(slice(o, o + d) for o, d in zip(offset, spatial))


def _conv_fwd(x, w, b):
    rank = x.ndim - 1
    k = 3 ** rank
    if w.ndim != 3 or w.shape[1] != k or w.shape[2] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv: x{x.shape} W{w.shape} b{b.shape}")
    spatial = x.shape[1:]
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * rank)
    cols = np.empty((k, x.shape[0]) + spatial, dtype=x.dtype)
    for i, off in enumerate(itertools.product(range(3), repeat=rank)):
        cols[i] = xp[(slice(None),) + _shifted(spatial, off)]
    cols = cols.reshape(k * x.shape[0], -1)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape((w.shape[0],) + spatial), (cols, w, x.shape)


def _conv_vjp(g, saved, needs):
    cols, w, xshape = saved
    g2 = g.reshape(g.shape[0], -1)
    gx = gw = gb = None
    if needs[1]:
        gw = (g2 @ cols.T).reshape(w.shape)
    if needs[2]:
        gb = g2.sum(axis=1)
    if needs[0]:
        rank = len(xshape) - 1
        spatial = xshape[1:]
        gcols = (w.reshape(w.shape[0], -1).T @ g2).reshape((3 ** rank, xshape[0]) + spatial)
        gp = np.zeros((xshape[0],) + tuple(d + 2 for d in spatial), dtype=g.dtype)
        for i, off in enumerate(itertools.product(range(3), repeat=rank)):
            gp[(slice(None),) + _shifted(spatial, off)] += gcols[i]
        gx = gp[(slice(None),) + tuple(slice(1, -1) for _ in spatial)]
    return gx, gw, gb


_primitive("conv")((_conv_fwd, _conv_vjp))


def _add_channel_fwd(x, v):
    if v.shape != (x.shape[0],):
        raise ShapeError(f"add_channel: x{x.shape} v{v.shape}")
    return x + v.reshape((-1,) + (1,) * (x.ndim - 1)), x.ndim


def _add_channel_vjp(g, ndim, needs):
    return (g, g.reshape(g.shape[0], -1).sum(axis=1) if needs[1] else None)


_primitive("add_channel")((_add_channel_fwd, _add_channel_vjp))


def _pool_fwd(x):
    rank = x.ndim - 1
    if any(d % 2 for d in x.shape[1:]):
        raise ShapeError(f"avgpool2 needs even dims, got {x.shape[1:]}")
    shape = [x.shape[0]]
    for d in x.shape[1:]:
        shape += [d // 2, 2]
    return x.reshape(shape).mean(axis=tuple(range(2, 2 + 2 * rank, 2))), None


def _upsample(x):
    for axis in range(1, x.ndim):
        x = np.repeat(x, 2, axis=axis)
    return x


def _pool_vjp(g, saved, needs):
    rank = g.ndim - 1
    return (_upsample(g) * g.dtype.type(0.5 ** rank),)


def _upsample_vjp(g, saved, needs):
    rank = g.ndim - 1
    shape = [g.shape[0]]
    for d in g.shape[1:]:
        shape += [d // 2, 2]
    return (g.reshape(shape).sum(axis=tuple(range(2, 2 + 2 * rank, 2))),)


_primitive("avgpool2")((_pool_fwd, _pool_vjp))
_primitive("upsample2")((lambda x: (_upsample(x), None), _upsample_vjp))


def _silu_fwd(x):
    sig = expit(x)
    return x * sig, (x, sig)


def _silu_vjp(g, saved, needs):
    x, sig = saved
    return (g * (sig * (1 + x * (1 - sig))),)


_primitive("silu")((_silu_fwd, _silu_vjp))
_primitive("sin")((lambda x: (np.sin(x), x), lambda g, x, needs: (g * np.cos(x),)))
_primitive("cos")((lambda x: (np.cos(x), x), lambda g, x, needs: (-g * np.sin(x),)))


def _grid_sample_fwd(field, coords):
    """Multilinear sampling of ``field`` (C, *dims) at ``coords`` (rank, *out)."""
    dims = field.shape[1:]
    rank = len(dims)
    if coords.shape[0] != rank:
        raise ShapeError(f"grid_sample: coords{coords.shape} for field{field.shape}")
    base, frac, inside = linear_stencil(coords, dims)
    strides = flat_strides(dims)
    flat = field.reshape(field.shape[0], -1)
    out_shape = coords.shape[1:]
    weights = [(1 - frac[a], frac[a]) for a in range(rank)]
    out = np.zeros((field.shape[0],) + out_shape, dtype=np.result_type(field, frac))
    corners = []
    for corner in corner_offsets(rank):
        idx = np.zeros(out_shape, dtype=np.int64)
        w = np.ones(out_shape, dtype=frac.dtype)
        for a, bit in enumerate(corner):
            idx += (base[a] + bit) * strides[a]
            w = w * weights[a][bit]
        vals = flat[:, idx]
        out += vals * w
        corners.append((corner, idx, w, vals))
    return out, (corners, weights, inside, field.shape)


def _grid_sample_vjp(g, saved, needs):
    corners, weights, inside, fshape = saved
    rank = len(fshape) - 1
    gfield = gcoords = None
    if needs[0]:
        size = int(np.prod(fshape[1:]))
        gflat = np.zeros((fshape[0], size), dtype=np.float64)
        for _, idx, w, _ in corners:
            ridx = idx.ravel()
            for c in range(fshape[0]):
                gflat[c] += np.bincount(ridx, weights=(g[c] * w).ravel(), minlength=size)
        gfield = gflat.astype(g.dtype).reshape(fshape)
    if needs[1]:
        gcoords = np.zeros((rank,) + g.shape[1:], dtype=g.dtype)
        for corner, idx, _, vals in corners:
            gv = (g * vals).sum(axis=0)
            for a in range(rank):
                dw = np.ones_like(gv)
                for b, bit in enumerate(corner):
                    if b != a:
                        dw = dw * weights[b][bit]
                gcoords[a] += gv * dw if corner[a] else -(gv * dw)
        # the clamped coordinate is treated as a constant
        gcoords = np.where(inside, gcoords, 0).astype(g.dtype)
    return gfield, gcoords


_primitive("grid_sample")((_grid_sample_fwd, _grid_sample_vjp))


def _clamp_stop_fwd(x, upper):
    upper = np.asarray(upper, dtype=x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    inside = (x >= 0) & (x <= upper)
    return np.clip(x, 0, upper), inside


_primitive("clamp_stop")((_clamp_stop_fwd, lambda g, inside, needs, upper: (np.where(inside, g, 0).astype(g.dtype),)))


def _mean_fwd(x):
    return np.asarray(x.mean(dtype=np.float64)), (x.shape, x.dtype)


def _mean_vjp(g, saved, needs):
    shape, dtype = saved
    return (np.full(shape, float(g) / int(np.prod(shape)), dtype=dtype),)


_primitive("mean")((_mean_fwd, _mean_vjp))


def _sumsq_fwd(x):
    x64 = x.astype(np.float64)
    return np.asarray(np.sum(x64 * x64)), x


_primitive("sumsq")((_sumsq_fwd, lambda g, x, needs: ((2.0 * float(g)) * x,)))


def _sqrt_fwd(x):
    out = np.sqrt(x)
    return out, out


def _sqrt_vjp(g, out, needs):
    # subgradient 0 at the origin keeps zero residuals finite
    safe = np.where(out > 0, out, 1)
    return (np.where(out > 0, 0.5 * g / safe, 0).astype(g.dtype),)


_primitive("sqrt")((_sqrt_fwd, _sqrt_vjp))


def window_sum_array(x: np.ndarray, window: int) -> np.ndarray:
    """Sum over every full ``window``-wide box; output is ``d - window + 1``
    per axis, accumulated in double precision."""
    out = x.astype(np.float64)
    for axis in range(x.ndim):
        c = np.cumsum(out, axis=axis)
        pad = [(0, 0)] * x.ndim
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        n = out.shape[axis]
        out = np.take(c, np.arange(window, n + 1), axis=axis) - np.take(c, np.arange(0, n - window + 1), axis=axis)
    return out


def _window_sum_fwd(x, window):
    if any(d < window for d in x.shape):
        raise ShapeError(f"window {window} larger than array {x.shape}")
    return window_sum_array(x, window), x.dtype


def _window_sum_vjp(g, dtype, needs, window):
    # adjoint of a valid box sum is a full box sum
    gp = np.pad(g, [(window - 1, window - 1)] * g.ndim)
    return (window_sum_array(gp, window).astype(dtype),)


_primitive("window_sum")((_window_sum_fwd, _window_sum_vjp))


def _concat_fwd(*xs):
    for x in xs[1:]:
        if x.shape[1:] != xs[0].shape[1:]:
            raise ShapeError(f"concat: {xs[0].shape} vs {x.shape}")
    return np.concatenate(xs, axis=0), [x.shape[0] for x in xs]


def _concat_vjp(g, sizes, needs):
    splits = np.cumsum(sizes)[:-1]
    return tuple(part if need else None for part, need in zip(np.split(g, splits, axis=0), needs))


_primitive("concat")((_concat_fwd, _concat_vjp))


def _reshape_fwd(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape}")
    return x.reshape(shape), x.shape


def _forward_diff_vjp(g, shape, needs, axis):
    out = np.zeros(shape, dtype=g.dtype)
    lead = (slice(None),) * axis
    out[lead + (slice(1, None),)] += g
    out[lead + (slice(None, -1),)] -= g
    return (out,)


_primitive("forward_diff")((lambda x, axis: (np.diff(x, axis=axis), x.shape), _forward_diff_vjp))
_primitive("astype")((lambda x, dtype: (x.astype(dtype), x.dtype), lambda g, dt, needs, dtype: (g.astype(dt),)))
_primitive("reshape")((_reshape_fwd, lambda g, shape0, needs, shape: (g.reshape(shape0),)))

PRIMITIVES = tuple(sorted(_PRIMS))


class Tape:
    """Append-only record of primitive applications.

    ``grad=False`` builds a forward-only tape (nothing saved for backward).
    """

    def __init__(self, dtype=np.float32, grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.grad = grad
        self.nodes = []
        self._bound = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, value, parents=(), saved=None, payload=None, requires_grad=False):
        node = Node(self, len(self.nodes), op, value, tuple(parents), saved, payload or {}, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._append("const", np.asarray(value, dtype=self.dtype))

    def leaf(self, value) -> Node:
        """A differentiable input."""
        return self._append("leaf", np.array(value, dtype=self.dtype), requires_grad=self.grad)

    def bind(self, params: ParamVector) -> Dict[str, Node]:
        """Leaf nodes for every named slice of ``params`` (cached per tape)."""
        key = id(params)
        if key not in self._bound:
            nodes = {}
            for name, (off, shape) in params.layout.items():
                node = self.leaf(params.view(name))
                node.flat = (off, int(np.prod(shape)))
                nodes[name] = node
            self._bound[key] = (params, nodes)
        return self._bound[key][1]

    def record(self, op: str, inputs: Sequence[Node], **payload) -> Node:
        try:
            fwd, _ = _PRIMS[op]
        except KeyError:
            raise UnsupportedOp(f"unknown primitive {op!r}") from None
        for node in inputs:
            if not isinstance(node, Node) or node.tape is not self:
                raise ShapeError(f"{op}: inputs must be nodes of this tape")
        out, saved = fwd(*[n.value for n in inputs], **payload)
        requires = self.grad and any(n.requires_grad for n in inputs)
        if not requires:
            saved = None
        return self._append(op, out, inputs, saved, payload, requires)

    def backward(self, loss: Node, wrt: Optional[Sequence[Node]] = None):
        """Adjoint of ``loss`` w.r.t. the bound parameter vector, or w.r.t.
        the given leaves when ``wrt`` is passed (returned as a list)."""
        if loss.value.size != 1:
            raise NotScalar(f"loss has shape {loss.value.shape}")
        adj = {loss.index: np.ones_like(loss.value)}
        leaves = {}
        for node in reversed(self.nodes[:loss.index + 1]):
            g = adj.pop(node.index, None)
            if g is None or not node.requires_grad:
                continue
            if not node.parents:
                leaves[node.index] = g
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            _, vjp = _PRIMS[node.op]
            grads = vjp(g, node.saved, needs, **node.payload)
            for parent, gp in zip(node.parents, grads):
                if gp is None or not parent.requires_grad:
                    continue
                prev = adj.get(parent.index)
                adj[parent.index] = gp if prev is None else prev + gp
        if wrt is not None:
            return [leaves.get(n.index, np.zeros_like(n.value)) for n in wrt]
        if len(self._bound) != 1:
            raise ValueError("backward without wrt needs exactly one bound ParamVector")
        params, nodes = next(iter(self._bound.values()))
        flat = np.zeros(len(params))
        for node in nodes.values():
            if node.index in leaves:
                off, n = node.flat
                flat[off:off + n] = leaves[node.index].ravel()
        return params.with_values(flat)


def grad_check(f: Callable[[Tape, ParamVector], Node], theta: ParamVector, h: float = 1e-4,
               gradient: Optional[Callable[[ParamVector], np.ndarray]] = None,
               indices: Optional[Sequence[int]] = None) -> float:
    """Max relative error between the analytic gradient of ``f`` and central
    finite differences, both in double precision.

    ``f(tape, theta)`` must build a scalar node on ``tape`` using
    ``tape.bind(theta)``.  ``gradient`` overrides the tape gradient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if gradient is None:
        tape = Tape(np.float64)
        analytic = tape.backward(f(tape, theta)).values
    else:
        analytic = np.asarray(gradient(theta), dtype=np.float64)
    idx = range(len(theta)) if indices is None else indices
    worst = 0.0
    for k in idx:
        vals = theta.values.copy()
        vals[k] += h
        up = float(f(Tape(np.float64, grad=False), theta.with_values(vals)))
        vals[k] -= 2 * h
        down = float(f(Tape(np.float64, grad=False), theta.with_values(vals)))
        fd = (up - down) / (2 * h)
        err = abs(analytic[k] - fd) / (abs(analytic[k]) + abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst
