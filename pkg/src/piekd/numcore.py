"""Dense float64 arrays with a tape-based reverse-mode autodiff, MLPs and Adam.

Tensors are plain ``numpy.ndarray`` objects in float64 (a shape plus row-major
data). A :class:`Graph` records every operation applied to its :class:`Var`
nodes so that :meth:`Graph.backward` can propagate adjoints from a scalar root.

Binary elementwise ops broadcast like numpy; leading "stack" axes are how an
ensemble of identically shaped networks is evaluated in one pass.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

DTYPE = np.float64


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, where, detail=""):
        self.where = where
        msg = f"non-finite value produced by {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _check_finite(op, value):
    # a single reduction is cheaper than isfinite().all(); only an overflowing
    # sum of finite entries needs the exact check
    if not math.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NonFiniteError(op)
    return value


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _rows3(a):
    return a.reshape((-1,) + a.shape[-2:])


def _bias_like(b, lead):
    """Bias viewed as (S, 1, F) against an output with leading shape ``lead``."""
    if b.shape[:-2] != lead:
        b = np.ascontiguousarray(np.broadcast_to(b, lead + b.shape[-2:]))
    return _rows3(b)


def dense(x, w, b, relu):
    """``relu(x @ w + b)`` (or without the ReLU) as plain arrays."""
    z = x @ w
    if relu:
        kernels.bias_relu(_rows3(z), _bias_like(b, z.shape[:-2]))
    else:
        z += b
    return z


class Var:
    """A node of a :class:`Graph`: op kind, inputs, value and adjoint."""

    __slots__ = ("graph", "op", "inputs", "value", "grad", "requires_grad", "_vjp", "name")

    def __init__(self, graph, op, inputs, value, requires_grad, vjp=None, name=None):
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    def _wrap(self, other):
        if isinstance(other, Var):
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._wrap(other))

    def __rsub__(self, other):
        return self.graph.sub(self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._wrap(other))


class Graph:
    """Append-only tape of operations.

    Nodes are stored in creation order, which is a topological order since an
    op can only consume nodes that already exist.
    """

    def __init__(self):
        self.nodes = []

    def _node(self, op, inputs, value, vjp, check=True):
        # ops that map finite inputs to finite outputs pass check=False
        if check:
            _check_finite(op, value)
        req = any(v.requires_grad for v in inputs)
        var = Var(self, op, inputs, value, req, vjp if req else None)
        self.nodes.append(var)
        return var

    def custom(self, op, inputs, value, vjp, check=True):
        """Record a caller-defined op. ``vjp(g)`` returns one adjoint (or None) per input."""
        return self._node(op, tuple(inputs), np.asarray(value, dtype=DTYPE), vjp, check)

    # --- leaves -------------------------------------------------------------

    def leaf(self, value, name=None, requires_grad=True, check=True):
        value = np.asarray(value, dtype=DTYPE)
        if check:
            _check_finite(f"leaf {name or ''}".strip(), value)
        var = Var(self, "leaf", (), value, requires_grad, name=name)
        self.nodes.append(var)
        return var

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    # --- elementwise binary ----------------------------------------------------

    def _bshape(self, op, a, b):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(op, a.shape, b.shape) from None

    def add(self, a, b):
        self._bshape("add", a, b)
        return self._node(
            "add",
            (a, b),
            a.value + b.value,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    def sub(self, a, b):
        self._bshape("sub", a, b)
        return self._node(
            "sub",
            (a, b),
            a.value - b.value,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def mul(self, a, b):
        self._bshape("mul", a, b)
        return self._node(
            "mul",
            (a, b),
            a.value * b.value,
            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        )

    def minimum(self, a, b):
        self._bshape("minimum", a, b)
        pick_a = a.value <= b.value
        return self._node(
            "minimum",
            (a, b),
            np.where(pick_a, a.value, b.value),
            lambda g: (
                _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
            ),
            check=False,
        )

    def scale(self, a, c):
        return self._node("scale", (a,), a.value * c, lambda g: (g * c,))

    # --- linear algebra ----------------------------------------------------------

    def matmul(self, a, b):
        if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        av, bv = a.value, b.value

        def vjp(g):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb

        return self._node("matmul", (a, b), av @ bv, vjp)

    def affine(self, x, w, b):
        """``x @ w + b`` as one node."""
        if x.value.ndim < 2 or w.value.ndim < 2 or x.shape[-1] != w.shape[-2]:
            raise ShapeError("affine", x.shape, w.shape)
        xv, wv = x.value, w.value
        out = xv @ wv
        try:
            out += b.value
        except ValueError:
            raise ShapeError("affine", out.shape, b.shape) from None

        def vjp(g):
            gx = _unbroadcast(g @ np.swapaxes(wv, -1, -2), x.shape) if x.requires_grad else None
            if w.requires_grad:
                gw = _unbroadcast(np.swapaxes(xv, -1, -2) @ g, w.shape)
                gb = _unbroadcast(g.sum(axis=-2, keepdims=True), b.shape)
            else:
                gw = gb = None
            return gx, gw, gb

        return self._node("affine", (x, w, b), out, vjp)

    def dense(self, x, w, b, relu=True):
        """Fused ``relu(x @ w + b)``; with ``relu=False`` the same as :meth:`affine`."""
        if not relu:
            return self.affine(x, w, b)
        if x.value.ndim < 2 or w.value.ndim < 2 or x.shape[-1] != w.shape[-2]:
            raise ShapeError("dense", x.shape, w.shape)
        xv, wv = x.value, w.value
        try:
            y = dense(xv, wv, b.value, True)
        except ValueError:
            raise ShapeError("dense", xv.shape, wv.shape, b.shape) from None

        def vjp(g):
            gz = np.empty_like(y)
            gb = np.empty(y.shape[:-2] + (1, y.shape[-1]))
            kernels.relu_grad(_rows3(np.ascontiguousarray(g)), _rows3(y), _rows3(gz), _rows3(gb))
            gx = _unbroadcast(gz @ np.swapaxes(wv, -1, -2), x.shape) if x.requires_grad else None
            if w.requires_grad:
                return gx, _unbroadcast(np.swapaxes(xv, -1, -2) @ gz, w.shape), _unbroadcast(gb, b.shape)
            return gx, None, None

        # ReLU of finite values is finite
        return self._node("dense", (x, w, b), y, vjp, check=False)

    # --- elementwise unary ---------------------------------------------------------

    def relu(self, a):
        y = np.maximum(a.value, 0.0)
        return self._node("relu", (a,), y, lambda g: (g * (y > 0.0),), check=False)

    def tanh(self, a):
        y = np.tanh(a.value)
        return self._node("tanh", (a,), y, lambda g: (g * (1.0 - y * y),), check=False)

    def exp(self, a):
        with np.errstate(over="ignore"):
            y = np.exp(a.value)
        return self._node("exp", (a,), y, lambda g: (g * y,))

    def log(self, a):
        av = a.value
        if (av <= 0.0).any():
            raise NonFiniteError("log", "non-positive input")
        return self._node("log", (a,), np.log(av), lambda g: (g / av,))

    def square(self, a):
        av = a.value
        return self._node("square", (a,), av * av, lambda g: (2.0 * g * av,))

    def softplus(self, a):
        av = a.value
        y = np.logaddexp(0.0, av)
        return self._node("softplus", (a,), y, lambda g: (g / (1.0 + np.exp(-av)),))

    def clip(self, a, lo, hi):
        av = a.value
        inside = (av >= lo) & (av <= hi)
        return self._node("clip", (a,), np.clip(av, lo, hi), lambda g: (g * inside,), check=False)

    # --- reductions and shape ---------------------------------------------------------

    def sum(self, a, axis=None, keepdims=False):
        shape = a.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return self._node("sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims), vjp)

    def mean(self, a, axis=None, keepdims=False):
        shape = a.shape
        count = a.value.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
        scale = 1.0 / float(count)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g * scale, shape),)

        return self._node("mean", (a,), np.mean(a.value, axis=axis, keepdims=keepdims), vjp)

    def concat(self, parts, axis=-1):
        try:
            out = np.concatenate([p.value for p in parts], axis=axis)
        except ValueError:
            raise ShapeError("concat", *[p.shape for p in parts]) from None
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def vjp(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._node("concat", tuple(parts), out, vjp, check=False)

    def reshape(self, a, shape):
        shape = tuple(shape)
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", old, shape) from None
        return self._node("reshape", (a,), out, lambda g: (g.reshape(old),), check=False)

    def index(self, a, key):
        """Basic (view) indexing ``a[key]``."""
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return self._node("index", (a,), a.value[key], vjp, check=False)

    def cols(self, a, start, stop):
        """Slice ``[start:stop]`` of the last axis."""
        shape = a.shape
        if not 0 <= start < stop <= shape[-1]:
            raise ShapeError("cols", shape, (start, stop))

        def vjp(g):
            full = np.zeros(shape)
            full[..., start:stop] = g
            return (full,)

        return self._node("cols", (a,), a.value[..., start:stop], vjp, check=False)

    # --- backward ----------------------------------------------------------------------

    def backward(self, root):
        """Populate ``.grad`` on every node the scalar ``root`` depends on."""
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            for inp, gi in zip(node.inputs, node._vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi
        return root

    def grad(self, root, wrt):
        """Adjoints of ``root`` for each leaf in ``wrt`` (zeros when unreachable)."""
        self.backward(root)
        return [v.grad if v.grad is not None else np.zeros_like(v.value) for v in wrt]


# --- MLP ---------------------------------------------------------------------------


class Mlp:
    """Fully connected ReLU network whose parameters live in one flat buffer.

    ``flat`` has shape ``stack + (n_params,)``; each weight ``(fan_in, fan_out)``
    and bias ``(1, fan_out)`` is a view into it (with the stack axes leading).
    A stack of ``()`` is a single network. Indexing an Mlp with a stack index
    returns a view network sharing storage.
    """

    def __init__(self, widths, flat, stack=()):
        self.widths = tuple(int(w) for w in widths)
        self.stack = tuple(stack)
        self.flat = flat
        if flat.shape != self.stack + (self.n_params(self.widths),):
            raise ShapeError("mlp", flat.shape, self.stack + (self.n_params(self.widths),))
        self.params = []
        off = 0
        for fi, fo in zip(self.widths[:-1], self.widths[1:]):
            w = flat[..., off : off + fi * fo].reshape(self.stack + (fi, fo))
            off += fi * fo
            b = flat[..., off : off + fo].reshape(self.stack + (1, fo))
            off += fo
            self.params.extend((w, b))

    @staticmethod
    def n_params(widths):
        return sum(fi * fo + fo for fi, fo in zip(widths[:-1], widths[1:]))

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        sub = self.flat[idx]
        return Mlp(self.widths, sub, sub.shape[:-1])

    def copy(self):
        return Mlp(self.widths, self.flat.copy(), self.stack)

    def __call__(self, x):
        """Plain numpy forward pass (no graph)."""
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.widths[0]:
            raise ShapeError("mlp", x.shape, (self.widths[0],))
        single = x.ndim == 1
        if single:
            x = x[None]
        p = self.params
        last = self.n_layers - 1
        for i in range(self.n_layers):
            x = dense(x, p[2 * i], p[2 * i + 1], i < last)
        return x[0] if single and not self.stack else x

    def leaves(self, graph, requires_grad=True):
        # parameters are verified finite by init and after every optimizer step
        return [graph.leaf(p, requires_grad=requires_grad, check=False) for p in self.params]

    def forward(self, graph, x, leaves=None):
        """Graph forward pass. ``leaves`` defaults to fresh trainable leaves."""
        if leaves is None:
            leaves = self.leaves(graph)
        if x.shape[-1] != self.widths[0]:
            raise ShapeError("mlp", x.shape, (self.widths[0],))
        last = self.n_layers - 1
        for i in range(self.n_layers):
            x = graph.dense(x, leaves[2 * i], leaves[2 * i + 1], relu=i < last)
        return x

    def flat_grad(self, leaves):
        """Concatenate leaf adjoints into a buffer shaped like ``flat``."""
        lead = self.stack
        parts = []
        for leaf, p in zip(leaves, self.params):
            g = leaf.grad if leaf.grad is not None else np.zeros_like(p)
            parts.append(np.reshape(g, lead + (-1,)))
        return np.concatenate(parts, axis=-1)


def init_uniform(widths, rng, stack=()):
    """Fan-in scaled uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0.

    ``rng`` is a ``numpy.random.Generator`` or, for a stack, a sequence of
    generators (one per leading-axis entry, flattened in C order) so that each
    member is determined by its own seed alone.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    stack = tuple(stack)
    n = Mlp.n_params(widths)
    flat = np.zeros(stack + (n,), dtype=DTYPE)
    rngs = [rng] if not stack else list(rng)
    count = int(np.prod(stack)) if stack else 1
    if len(rngs) != count:
        raise ValueError(f"need {count} generators for stack {stack}, got {len(rngs)}")
    rows = flat.reshape(count, n)
    for row, gen in zip(rows, rngs):
        off = 0
        for fi, fo in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fi)
            row[off : off + fi * fo] = gen.uniform(-bound, bound, size=fi * fo)
            off += fi * fo + fo
    return Mlp(widths, flat, stack)


# --- Adam --------------------------------------------------------------------------


def expand_mask(active, shape):
    """Broadcast a leading-axes boolean mask (or None = all) to ``shape``."""
    if active is None:
        return np.ones(shape, dtype=np.bool_)
    act = np.asarray(active, dtype=np.bool_)
    act = act.reshape(act.shape + (1,) * (len(shape) - act.ndim))
    return np.ascontiguousarray(np.broadcast_to(act, shape))


class AdamState:
    """Bias-corrected Adam over a flat parameter buffer.

    The buffer may carry leading stack axes; every stack entry keeps its own
    step count so entries can be reset (or skipped) independently.
    """

    def __init__(self, shape, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, name="params"):
        shape = tuple(shape)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.name = name
        self.m = np.zeros(shape, dtype=DTYPE)
        self.v = np.zeros(shape, dtype=DTYPE)
        self.step = np.zeros(shape[:-1], dtype=np.int64)

    @classmethod
    def like(cls, flat, **kw):
        return cls(flat.shape, **kw)

    def reset(self, idx=...):
        self.m[idx] = 0.0
        self.v[idx] = 0.0
        self.step[idx] = 0

    def apply(self, params, grads, active=None):
        """One Adam step in place on ``params`` (same shape as the moments)."""
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ShapeError(f"adam[{self.name}]", params.shape, grads.shape, self.m.shape)
        if not np.isfinite(grads).all():
            raise NonFiniteError(f"adam[{self.name}]", "gradient contains NaN/Inf")
        rows = int(np.prod(self.step.shape)) if self.step.shape else 1
        act = expand_mask(active, self.step.shape).reshape(rows)
        step = self.step.reshape(rows)
        step[act] += 1
        t = np.maximum(step, 1).astype(DTYPE)
        step_size = self.lr / (1.0 - self.beta1**t)
        bc2 = 1.0 - self.beta2**t
        kernels.adam_update(
            params.reshape(rows, -1),
            np.ascontiguousarray(grads, dtype=DTYPE).reshape(rows, -1),
            self.m.reshape(rows, -1),
            self.v.reshape(rows, -1),
            step_size,
            bc2,
            self.beta1,
            self.beta2,
            self.eps,
            act,
        )
        if not np.isfinite(params).all():
            raise NonFiniteError(f"adam[{self.name}]", "parameters became non-finite")
        return params

    def state_dict(self):
        return {"m": self.m, "v": self.v, "step": self.step}

    def load_state_dict(self, d):
        self.m[...] = d["m"]
        self.v[...] = d["v"]
        self.step[...] = d["step"]


def adam_step(state, params, grads, active=None):
    """Functional alias for :meth:`AdamState.apply`."""
    return state.apply(params, grads, active)
