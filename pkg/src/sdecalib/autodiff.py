"""Minimal reverse-mode differentiation over batched (batch, width) float64 arrays.

The tape records one node per tensor operation (affine layer, activation,
reduction).  Values flow forward through plain numpy; ``backward`` replays the
tape in reverse creation order, which is always a valid topological order.
Arrays are strictly 2-D: axis 0 is the Monte Carlo batch, axis 1 the feature
width.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; under tamed dynamics this is a bug."""


class Param:
    """A named trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "values", "grad", "frozen")

    def __init__(self, name, values):
        self.name = name
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.frozen = False

    def zero_grad(self):
        self.grad[...] = 0.0


class ParamStore:
    """Ordered collection of Params addressed by name."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name, values) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, values)
        self._params[name] = p
        return p

    def get(self, name) -> Param:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def n_scalars(self):
        return sum(p.values.size for p in self._params.values())


class _Node:
    __slots__ = ("parents", "vjp", "vjp_per_path", "param", "batch_reducing")

    def __init__(self, parents=(), vjp=None, vjp_per_path=None, param=None,
                 batch_reducing=False):
        self.parents = parents
        self.vjp = vjp
        self.vjp_per_path = vjp_per_path
        self.param = param
        self.batch_reducing = batch_reducing


class Tape:
    """Wengert list of recorded operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _append(self, node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class DiffArray:
    """Batched values plus an optional handle into the recording tape.

    ``nid is None`` means the array is detached: it is a constant for any
    subsequent backward pass.
    """

    __slots__ = ("values", "tape", "nid")

    def __init__(self, values, tape=None, nid=None):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"DiffArray must be 2-D, got shape {v.shape}")
        self.values = v
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.values.shape


def constant(values, tape=None) -> DiffArray:
    """Wrap raw values; bound to a tape (for mixing with params) but not recorded."""
    return DiffArray(values, tape, None)


def detach(x: DiffArray) -> DiffArray:
    """Same values, no tape linkage; idempotent."""
    return DiffArray(x.values, None, None)


def leaf(p: Param, tape: Tape) -> DiffArray:
    """Record a parameter as a leaf so ops on it alone still reach the tape."""
    nid = tape._append(_Node(param=p))
    return DiffArray(p.values, tape, nid)


def _ensure_finite(values):
    if not np.isfinite(values).all():
        raise NonFiniteError("non-finite values in operation output")
    return values


def _as_values(arg):
    if isinstance(arg, DiffArray):
        return arg.values
    if isinstance(arg, Param):
        return arg.values
    v = np.asarray(arg, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    return v


def _find_tape(*args):
    tape = None
    for a in args:
        if isinstance(a, DiffArray) and a.tape is not None:
            if tape is not None and a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = a.tape
    return tape


def _needs_grad(arg):
    return isinstance(arg, Param) or (isinstance(arg, DiffArray) and arg.nid is not None)


def _parent_id(arg, tape):
    """Node id of an operand, creating a leaf node for Param uses."""
    if isinstance(arg, Param):
        return tape._append(_Node(param=arg))
    if isinstance(arg, DiffArray):
        return arg.nid
    return None


def _record(tape, values, args, vjp, vjp_per_path=None, batch_reducing=False):
    _ensure_finite(values)
    if tape is None or not any(_needs_grad(a) for a in args):
        return DiffArray(values, tape, None)
    parents = tuple(_parent_id(a, tape) for a in args)
    nid = tape._append(_Node(parents, vjp, vjp_per_path, None, batch_reducing))
    return DiffArray(values, tape, nid)


def _unbroadcast(adj, shape):
    """Reduce an adjoint back to the shape of a broadcast operand."""
    if adj.shape == shape:
        return adj
    out = adj
    if shape[0] == 1 and adj.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# elementwise and binary ops


def add(x, y):
    xv, yv = _as_values(x), _as_values(y)
    tape = _find_tape(x, y)
    return _record(tape, xv + yv, (x, y),
                   lambda g: (_unbroadcast(g, xv.shape), _unbroadcast(g, yv.shape)))


def sub(x, y):
    xv, yv = _as_values(x), _as_values(y)
    tape = _find_tape(x, y)
    return _record(tape, xv - yv, (x, y),
                   lambda g: (_unbroadcast(g, xv.shape), _unbroadcast(-g, yv.shape)))


def mul(x, y):
    xv, yv = _as_values(x), _as_values(y)
    tape = _find_tape(x, y)
    return _record(tape, xv * yv, (x, y),
                   lambda g: (_unbroadcast(g * yv, xv.shape),
                              _unbroadcast(g * xv, yv.shape)))


def div(x, y):
    xv, yv = _as_values(x), _as_values(y)
    tape = _find_tape(x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = xv / yv
    return _record(tape, out, (x, y),
                   lambda g: (_unbroadcast(g / yv, xv.shape),
                              _unbroadcast(-g * xv / (yv * yv), yv.shape)))


def scale(x, c: float):
    xv = _as_values(x)
    c = float(c)
    return _record(_find_tape(x), xv * c, (x,), lambda g: (g * c,))


def exp(x):
    xv = _as_values(x)
    out = np.exp(xv)
    return _record(_find_tape(x), out, (x,), lambda g: (g * out,))


def log(x):
    xv = _as_values(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return _record(_find_tape(x), out, (x,), lambda g: (g / xv,))


def sqrt(x):
    xv = _as_values(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(xv)
    return _record(_find_tape(x), out, (x,), lambda g: (g / (2.0 * out),))


def tanh(x):
    xv = _as_values(x)
    out = np.tanh(xv)
    return _record(_find_tape(x), out, (x,), lambda g: (g * (1.0 - out * out),))


def absval(x):
    xv = _as_values(x)
    return _record(_find_tape(x), np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def relu(x):
    xv = _as_values(x)
    out = np.maximum(xv, 0.0)
    return _record(_find_tape(x), out, (x,), lambda g: (g * (out > 0.0),))


def softplus(x):
    """log(1 + exp(x)) via logaddexp, stable for large |x|."""
    xv = _as_values(x)
    out = np.logaddexp(0.0, xv)
    return _record(_find_tape(x), out, (x,), lambda g: (g * expit(xv),))


def affine(x, W, B):
    """W-right-multiplied affine map: x @ W + B, with W of shape (in, out)."""
    xv, Wv, Bv = _as_values(x), _as_values(W), _as_values(B)
    if xv.shape[1] != Wv.shape[0]:
        raise ValueError(f"affine shape mismatch: x {xv.shape} vs W {Wv.shape}")
    if Bv.size != Wv.shape[1]:
        raise ValueError(f"affine bias width {Bv.size} != {Wv.shape[1]}")
    Bv = Bv.reshape(1, -1)
    out = xv @ Wv + Bv

    def vjp(g):
        return (g @ Wv.T, xv.T @ g, g.sum(axis=0, keepdims=True))

    def vjp_pp(g):
        return (g @ Wv.T, np.einsum("ni,no->nio", xv, g), g)

    return _record(_find_tape(x, W, B), out, (x, W, B), vjp, vjp_pp)


def concat(parts):
    """Width-wise concatenation of (N, w_i) arrays."""
    vals = [_as_values(p) for p in parts]
    widths = [v.shape[1] for v in vals]
    offs = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(vals)))

    return _record(_find_tape(*parts), np.concatenate(vals, axis=1), tuple(parts), vjp)


def tile_rows(x, n: int):
    """Broadcast a (1, W) array to (n, W)."""
    xv = _as_values(x)
    if xv.shape[0] != 1:
        raise ValueError("tile_rows expects a single-row array")
    out = np.broadcast_to(xv, (n, xv.shape[1]))

    def vjp(g):
        return (g.sum(axis=0, keepdims=True),)

    def vjp_pp(g):
        return (g,)

    return _record(_find_tape(x), np.ascontiguousarray(out), (x,), vjp, vjp_pp)


# ---------------------------------------------------------------------------
# reductions


def mean(x):
    """Column-wise mean over the batch: (N, M) -> (1, M)."""
    xv = _as_values(x)
    n = xv.shape[0]
    if n == 0:
        raise ValueError("mean of empty batch")
    out = xv.mean(axis=0, keepdims=True)
    return _record(_find_tape(x), out, (x,),
                   lambda g: (np.broadcast_to(g / n, xv.shape),),
                   batch_reducing=True)


def sample_variance(x):
    """Column-wise unbiased sample variance (divisor N-1): (N, M) -> (1, M)."""
    xv = _as_values(x)
    n = xv.shape[0]
    if n < 2:
        raise ValueError("sample variance needs a batch of at least 2")
    centered = xv - xv.mean(axis=0, keepdims=True)
    out = (centered * centered).sum(axis=0, keepdims=True) / (n - 1)
    return _record(_find_tape(x), out, (x,),
                   lambda g: (g * (2.0 / (n - 1)) * centered,),
                   batch_reducing=True)


def total(x):
    """Sum of all entries -> (1, 1)."""
    xv = _as_values(x)
    out = np.array([[xv.sum()]])
    return _record(_find_tape(x), out, (x,),
                   lambda g: (np.broadcast_to(g, xv.shape),),
                   batch_reducing=True)


def running_max(seq):
    """Elementwise running maximum of a sequence of (N, 1) arrays.

    The subgradient is routed to the first element attaining the maximum.
    """
    seq = list(seq)
    if not seq:
        raise ValueError("running_max of empty sequence")
    vals = np.concatenate([_as_values(s) for s in seq], axis=1)
    idx = np.argmax(vals, axis=1)  # first maximiser
    out = vals[np.arange(vals.shape[0]), idx].reshape(-1, 1)

    def vjp(g):
        return tuple(g * (idx == k).reshape(-1, 1) for k in range(len(seq)))

    return _record(_find_tape(*seq), out, tuple(seq), vjp, vjp)


def stepwise_weighted_sum(terms, weights, col_limits):
    """Sum over steps k of weights[k] * terms[k], column j truncated at col_limits[j].

    terms: list of (N, M) arrays; weights: list of (N, 1) constant arrays;
    col_limits: ints, column j accumulates steps k < col_limits[j].
    """
    limits = np.asarray(col_limits, dtype=np.int64)
    wv = [np.asarray(_as_values(w)) for w in weights]
    tv = [_as_values(t) for t in terms]
    if len(tv) != len(wv):
        raise ValueError("terms and weights length mismatch")
    n, m = tv[0].shape
    if limits.size != m:
        raise ValueError("col_limits width mismatch")
    out = np.zeros((n, m))
    masks = [(k < limits).astype(np.float64).reshape(1, -1) for k in range(len(tv))]
    for k in range(len(tv)):
        out += wv[k] * tv[k] * masks[k]

    def vjp(g):
        return tuple(g * wv[k] * masks[k] for k in range(len(tv)))

    return _record(_find_tape(*terms), out, tuple(terms), vjp, vjp)


# ---------------------------------------------------------------------------
# backward passes


def backward(out: DiffArray):
    """Accumulate d(out)/d(param) into every unfrozen Param on the tape.

    ``out`` must be a recorded scalar of shape (1, 1).  Gradients add onto
    whatever is already in the accumulators.
    """
    if out.tape is None or out.nid is None:
        raise ValueError("backward on a detached array")
    if out.values.shape != (1, 1):
        raise ValueError(f"backward expects a (1, 1) scalar, got {out.values.shape}")
    nodes = out.tape.nodes
    adj = {out.nid: np.ones((1, 1))}
    for nid in range(out.nid, -1, -1):
        a = adj.pop(nid, None)
        if a is None:
            continue
        node = nodes[nid]
        if node.param is not None:
            if not node.param.frozen:
                node.param.grad += a.reshape(node.param.values.shape)
            continue
        for pid, pa in zip(node.parents, node.vjp(a)):
            if pid is None:
                continue
            if pid in adj:
                adj[pid] = adj[pid] + pa
            else:
                adj[pid] = pa


def per_path_backward(out: DiffArray, params: ParamStore):
    """Per-path parameter gradients of a (N, 1) output with no cross-path mixing.

    Returns {param name: array of shape (N,) + param shape}.  Intended for
    small models only; rejects graphs containing batch reductions.
    """
    if out.tape is None or out.nid is None:
        raise ValueError("per-path backward on a detached array")
    if out.values.shape[1] != 1:
        raise ValueError("per-path backward expects an (N, 1) output")
    n = out.values.shape[0]
    nodes = out.tape.nodes
    result = {p.name: np.zeros((n,) + p.values.shape) for p in params}
    adj = {out.nid: np.ones((n, 1))}
    for nid in range(out.nid, -1, -1):
        a = adj.pop(nid, None)
        if a is None:
            continue
        node = nodes[nid]
        if node.param is not None:
            if not node.param.frozen and node.param.name in result:
                result[node.param.name] += a.reshape((n,) + node.param.values.shape)
            continue
        if node.batch_reducing:
            raise ValueError("per-path backward through a batch reduction")
        vjp = node.vjp_per_path or node.vjp
        for pid, pa in zip(node.parents, vjp(a)):
            if pid is None:
                continue
            if pid in adj:
                adj[pid] = adj[pid] + pa
            else:
                adj[pid] = pa
    return result
