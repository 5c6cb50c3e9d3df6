"""Reverse-mode automatic differentiation over numpy arrays.

Operation-level tape: each op records its output ``Var`` together with a
vector-Jacobian closure. A :class:`Tape` context enables recording; a
``no_grad`` block suspends it, in which case ops return plain ndarrays
(used by the pushforward rollout, whose segment must contribute exactly
zero gradient). ``Tape.backward`` does one reverse sweep in recorded order
and returns gradients aligned with a parameter store.

Only the primitives needed by the models are implemented: dense affine
maps, smooth activations, sigmoid gating, einsum contractions (the
Clebsch-Gordan paths), gather / segment-sum aggregation, concatenation,
slicing, reshaping, means and squared-error losses.
"""

from functools import lru_cache

import numpy as np

_TAPE_STACK: list = []  # innermost active tape, or None while suspended


class Var:
    """Array node in the autodiff graph. Leaves are parameters."""

    __slots__ = ("data", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data)
        self._parents = parents
        self._vjp = vjp
        tape = active_tape()
        if tape is not None and vjp is not None:
            tape._nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar used throughout the models
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def param(data, dtype=np.float64) -> Var:
    """Tracked leaf (a learnable parameter)."""
    return Var(np.array(data, dtype=dtype))


def value(x) -> np.ndarray:
    """Underlying ndarray of a Var or array-like."""
    return x.data if isinstance(x, Var) else np.asarray(x)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _recording(*xs) -> bool:
    return active_tape() is not None and any(isinstance(x, Var) for x in xs)


class Tape:
    """Records ops while active; one backward sweep yields parameter gradients."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Var) -> dict:
        """Reverse sweep from a scalar loss.

        Returns a dict mapping ``id(var) -> gradient ndarray`` for every Var
        reached by the sweep (parameters included). Vars the loss does not
        depend on are simply absent; callers treat that as an exact zero.
        """
        if not isinstance(loss, Var):
            raise TypeError("loss must be a recorded Var")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not isinstance(p, Var):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        return grads


class no_grad:
    """Suspend recording; ops inside return plain ndarrays."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _recording(a, b):
        return out
    return Var(
        out,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not _recording(a, b):
        return out
    return Var(
        out,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _recording(a, b):
        return out
    return Var(
        out,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * bv, av.shape),
            _unbroadcast(g * av, bv.shape),
        ),
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    if not _recording(a, b):
        return out
    return Var(
        out,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        ),
    )


def power(a, p: float):
    av = value(a)
    out = av**p
    if not _recording(a):
        return out
    return Var(out, parents=(a,), vjp=lambda g: (g * p * av ** (p - 1.0),))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    if not _recording(a, b):
        return out

    def vjp(g):
        return (
            g @ np.swapaxes(bv, -1, -2),
            np.swapaxes(av, -1, -2) @ g,
        )

    return Var(out, parents=(a, b), vjp=vjp)


_PATH_CACHE: dict = {}


def _np_einsum(subscripts: str, *arrays: np.ndarray) -> np.ndarray:
    """np.einsum with the contraction path cached per (subscripts, shapes)."""
    key = (subscripts, tuple(a.shape for a in arrays))
    path = _PATH_CACHE.get(key)
    if path is None:
        path = np.einsum_path(subscripts, *arrays, optimize="optimal")[0]
        _PATH_CACHE[key] = path
    return np.einsum(subscripts, *arrays, optimize=path)


@lru_cache(maxsize=512)
def _einsum_vjp_subs(subscripts: str, n_ops: int):
    """Per-operand VJP subscripts for an explicit einsum signature."""
    inputs, out = subscripts.split("->")
    subs = inputs.split(",")
    if len(subs) != n_ops:
        raise ValueError("operand count does not match subscripts")
    plans = []
    for k, sk in enumerate(subs):
        others = [s for i, s in enumerate(subs) if i != k]
        known = set(out) | set("".join(others))
        if not set(sk) <= known:
            raise ValueError(
                f"cannot derive einsum VJP for operand {k} of {subscripts!r}"
            )
        plans.append((",".join([out] + others) + "->" + sk, k))
    return tuple(plans)


def einsum(subscripts: str, *ops):
    vals = [value(o) for o in ops]
    out = _np_einsum(subscripts, *vals)
    if not _recording(*ops):
        return out
    plans = _einsum_vjp_subs(subscripts, len(ops))

    def vjp(g):
        grads = []
        for (sub_k, k), op in zip(plans, ops):
            if not isinstance(op, Var):
                grads.append(None)
                continue
            others = [v for i, v in enumerate(vals) if i != k]
            grads.append(_np_einsum(sub_k, g, *others))
        return tuple(grads)

    return Var(out, parents=tuple(ops), vjp=vjp)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # overflow-safe in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    xv = value(x)
    out = _sigmoid_raw(xv)
    if not _recording(x):
        return out
    return Var(out, parents=(x,), vjp=lambda g: (g * out * (1.0 - out),))


def silu(x):
    """x * sigmoid(x), smooth everywhere."""
    xv = value(x)
    s = _sigmoid_raw(xv)
    out = xv * s
    if not _recording(x):
        return out
    return Var(out, parents=(x,), vjp=lambda g: (g * (s + out * (1.0 - s)),))


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _recording(*xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, parents=tuple(xs), vjp=vjp)


def narrow(x, axis: int, start: int, length: int):
    """Contiguous slice along one axis."""
    xv = value(x)
    idx = [slice(None)] * xv.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = xv[idx]
    if not _recording(x):
        return out

    def vjp(g):
        full = np.zeros_like(xv)
        full[idx] = g
        return (full,)

    return Var(out, parents=(x,), vjp=vjp)


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    if not _recording(x):
        return out
    return Var(out, parents=(x,), vjp=lambda g: (g.reshape(xv.shape),))


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    out = xv.mean(axis=axis, keepdims=keepdims)
    if not _recording(x):
        return out
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xv.shape).copy(),)

    return Var(out, parents=(x,), vjp=vjp)


def asum(x, axis=None, keepdims=False):
    xv = value(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not _recording(x):
        return out

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return Var(out, parents=(x,), vjp=vjp)


class SegmentPlan:
    """Precomputed adjoint plan for gather/segment-sum over an index array.

    ``starts``/``ids`` describe the nonempty segments of the *sorted* index
    array; ``order`` sorts raw entries by index. Built once per graph so the
    repeated scatter reductions stay off the slow ``np.add.at`` path and
    accumulate in a fixed, deterministic order.
    """

    def __init__(self, index: np.ndarray, n_segments: int):
        index = np.asarray(index, dtype=np.int64)
        self.index = index
        self.n_segments = int(n_segments)
        self.order = np.argsort(index, kind="stable")
        sorted_idx = index[self.order]
        ids, starts = np.unique(sorted_idx, return_index=True)
        self.ids = ids
        self.starts = starts
        self.is_sorted = bool(np.all(index[:-1] <= index[1:])) if index.size else True


def _segment_sum_raw(vals: np.ndarray, plan: SegmentPlan) -> np.ndarray:
    out = np.zeros((plan.n_segments,) + vals.shape[1:], dtype=vals.dtype)
    if plan.index.size == 0:
        return out
    v = vals if plan.is_sorted else vals[plan.order]
    out[plan.ids] = np.add.reduceat(v, plan.starts, axis=0)
    return out


def segment_sum(vals, plan: SegmentPlan):
    """Sum rows of ``vals`` into ``plan.n_segments`` buckets by ``plan.index``.

    Rows are reduced in the order they appear in ``vals`` (already canonical
    for graph edge arrays), so the result is reproducible bit-for-bit.
    """
    v = value(vals)
    out = _segment_sum_raw(v, plan)
    if not _recording(vals):
        return out
    return Var(out, parents=(vals,), vjp=lambda g: (g[plan.index],))


def gather(x, index: np.ndarray, plan: SegmentPlan):
    """Rows ``x[index]``; the adjoint scatter-adds through ``plan``."""
    xv = value(x)
    out = xv[index]
    if not _recording(x):
        return out
    return Var(out, parents=(x,), vjp=lambda g: (_segment_sum_raw(g, plan),))


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    """Normalize over the last axis, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def mse(pred, target):
    """Mean over all entries of the squared difference."""
    d = sub(pred, target)
    return mean(mul(d, d))
