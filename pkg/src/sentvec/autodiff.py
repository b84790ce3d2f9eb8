"""Reverse-mode differentiation on top of numpy.

Operations executed while a :class:`Tape` is active are appended to it in
execution order; :func:`backward` then walks the tape once, newest node first.
Outside a tape every op runs eagerly with no bookkeeping, which is what the
evaluation paths use.

Forward reductions that can see padding (softmax denominators, layer-norm
moments, pooled sums, loss sums) accumulate strictly left to right along the
reduced axis, so trailing zeros never change a result bit.
"""

from __future__ import annotations

import builtins
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "grad_check",
    "GradCheckReport",
    "forward_op",
    "record_op",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "gelu",
    "softmax",
    "layernorm",
    "embedding_gather",
    "cross_entropy",
    "sum",
    "mean",
    "max",
    "concat",
    "reshape",
    "transpose",
    "select",
]

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array with an optional link to the tape node that produced it."""

    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("index", "op", "inputs", "backward", "tape")

    def __init__(self, index, op, inputs, backward, tape):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.tape = tape


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nesting pushes a new tape and the innermost one
    receives the records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], fn) -> None:
        for inp in inputs:
            n = inp.node
            if n is not None and n.tape is self and n.index >= len(self.nodes):
                raise TapeError(f"{op}: input recorded after its consumer")
        node = _Node(len(self.nodes), op, tuple(inputs), fn, self)
        self.nodes.append(node)
        out.node = node


class _Paused(Tape):
    def record(self, op, out, inputs, fn) -> None:
        out.requires_grad = False


def no_record() -> Tape:
    """Context in which operations are evaluated but not recorded."""
    return _Paused()


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def record_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    """Wrap ``out_data`` as the output of ``op`` and record it if needed.

    ``fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    _check_finite(op, out_data)
    req = False
    for t in inputs:
        if t.requires_grad:
            req = True
            break
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = req
    out.node = None
    out.name = None
    if req and _ACTIVE:
        _ACTIVE[-1].record(op, out, inputs, fn)
    return out


# ---------------------------------------------------------------- helpers


def lr_sum(x: np.ndarray, axis: int | None = None, keepdims: bool = False) -> np.ndarray:
    """Sum with a fixed left-to-right accumulation order along ``axis``."""
    if axis is None:
        x = x.reshape(-1)
        axis = 0
    n = x.shape[axis]
    if n == 0:
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = np.take(np.cumsum(x, axis=axis), n - 1, axis=axis)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def fn(g):
        ga = _unbroadcast(g, sa) if a.requires_grad else None
        gb = _unbroadcast(g, sb) if b.requires_grad else None
        return ga, gb

    return record_op("add", a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def fn(g):
        ga = _unbroadcast(g, sa) if a.requires_grad else None
        gb = _unbroadcast(-g, sb) if b.requires_grad else None
        return ga, gb

    return record_op("sub", a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record_op("mul", ad * bd, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return record_op("scale", x.data * c, (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU, constants sqrt(2/pi) and 0.044715."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_A * (xd * xd * xd)))
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return record_op("gelu", out.astype(xd.dtype, copy=False), (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``. A 2-d ``b`` is applied to the last axis of any ``a``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return record_op("matmul", out, (a, b), fn)

    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return record_op("matmul", out, (a, b), fn)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "softmax")
    xd = x.data
    e = np.exp(xd - xd.max(axis=ax, keepdims=True))
    y = e / lr_sum(e, ax, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return record_op("softmax", y, (x,), fn)


def layernorm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    axis: int = -1,
    eps: float = 1e-6,
) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then optional affine."""
    ax = _norm_axis(axis, x.ndim, "layernorm")
    if (gamma is not None or beta is not None) and ax != x.ndim - 1:
        raise ShapeError("layernorm: affine parameters require the last axis")
    xd = x.data
    n = xd.shape[ax]
    # the normalised axis never contains padding, so a plain per-row sum is
    # already independent of batch size and sequence length
    xc = xd - np.sum(xd, axis=ax, keepdims=True) / n
    var = np.sum(xc * xc, axis=ax, keepdims=True) / n
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = [x] + [p for p in (gamma, beta) if p is not None]
    lead = tuple(range(xd.ndim - 1))

    def fn(g):
        gx_hat = g * gamma.data if gamma is not None else g
        m1 = gx_hat.mean(axis=ax, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=ax, keepdims=True)
        grads = [rstd * (gx_hat - m1 - xhat * m2)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return tuple(grads)

    return record_op("layernorm", out.astype(xd.dtype, copy=False), inputs, fn)


# ---------------------------------------------------------------- indexing


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding_gather: ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding_gather: table must be 2-d")
    v, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embedding_gather: id out of range [0, {v})")
    out = table.data[ids]

    def fn(g):
        gt = np.zeros((v, d), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return record_op("embedding_gather", out, (table,), fn)


def select(x: Tensor, index) -> Tensor:
    """Basic or advanced ``x[index]`` with scatter-add backward."""
    out = np.array(x.data[index], copy=True)
    shape, dtype = x.shape, x.dtype

    def fn(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return record_op("select", out, (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ax = _norm_axis(axis, tensors[0].ndim, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record_op("concat", out, tuple(tensors), fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from exc
    old = x.shape
    return record_op("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for {x.ndim}-d input")
    inv = tuple(np.argsort(axes))
    return record_op(
        "transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),)
    )


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is not None:
        ax = _norm_axis(axis, x.ndim, "sum")
    out = np.asarray(lr_sum(x.data, None if axis is None else ax, keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("sum", out, (x,), fn)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim, "mean")]
    return scale(sum(x, axis, keepdims), 1.0 / n)


def max(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties route the gradient to the first maximiser."""
    ax = _norm_axis(axis, x.ndim, "max")
    xd = x.data
    idx = np.expand_dims(np.argmax(xd, axis=ax), ax)
    out = np.take_along_axis(xd, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def fn(g):
        gx = np.zeros_like(xd)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, axis=ax)
        return (gx,)

    return record_op("max", out, (x,), fn)


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean token cross-entropy of ``logits`` [n, V] against integer ``targets`` [n].

    Rows whose target equals ``ignore_id`` are excluded from the mean.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [n, V], got {logits.shape}")
    t = np.asarray(targets)
    n, v = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    valid = np.ones(n, dtype=bool) if ignore_id is None else t != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ShapeError("cross_entropy: every target is ignored")
    tv = np.where(valid, t, 0)
    if tv.min() < 0 or tv.max() >= v:
        raise ShapeError("cross_entropy: target id out of range")
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - lse
    picked = np.where(valid, logp[np.arange(n), tv], 0.0)
    out = np.asarray(-lr_sum(picked) / count, dtype=ld.dtype)

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), tv] -= 1.0
        p *= (valid[:, None] * (g / count)).astype(p.dtype)
        return (p,)

    return record_op("cross_entropy", out, (logits,), fn)


# ---------------------------------------------------------------- dispatch

_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "gelu": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "embedding_gather": embedding_gather,
    "cross_entropy": cross_entropy,
    "mean": mean,
    "max": max,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "scale": scale,
    "sum": sum,
    "sub": sub,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def backward(
    tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | None = None
) -> dict:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    With ``params`` the result maps each name to an array (zeros when the
    parameter is not on any path to the loss). Without it the result maps
    ``id(leaf)`` to its gradient for every reachable leaf.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None or loss.node.tape is not tape:
        raise TapeError("backward: loss was not recorded on this tape")
    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    leaf: dict[int, np.ndarray] = {}
    start = loss.node.index
    grads[start] = np.ones_like(loss.data)
    for i in range(start, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        node = nodes[i]
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            n = inp.node
            if n is not None and n.tape is tape:
                if n.index >= i:
                    raise TapeError("backward: cyclic tape")
                prev = grads[n.index]
                grads[n.index] = gi if prev is None else prev + gi
            else:
                key = id(inp)
                prev = leaf.get(key)
                leaf[key] = gi if prev is None else prev + gi
    if params is None:
        return leaf
    out = {}
    for name, p in params.items():
        g = leaf.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_param: str | None
    failing_index: tuple | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.failing_param is None


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``. The
    floor keeps gradients that are exactly zero (e.g. attention key biases)
    from dividing rounding noise by ~0. With ``max_checks`` only that many
    randomly chosen elements per parameter are probed. Run it on float64
    parameters.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    with Tape() as tape:
        loss = f(params)
    if loss.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    analytic = backward(tape, loss, params)

    def value() -> float:
        return float(f(params).data)

    rng = np.random.default_rng(seed)
    worst, worst_name, worst_idx, checked = 0.0, None, None, 0
    fail_name, fail_idx = None, None
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idxs = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        ga = analytic[name].reshape(-1)
        for j in idxs:
            old = flat[j]
            flat[j] = old + step
            fp = value()
            flat[j] = old - step
            fm = value()
            flat[j] = old
            num = (fp - fm) / (2.0 * step)
            a = float(ga[j])
            rel = abs(a - num) / builtins.max(abs(a), abs(num), floor)
            checked += 1
            if rel > worst:
                worst, worst_name, worst_idx = rel, name, np.unravel_index(j, p.shape)
            if rel > tol and fail_name is None:
                fail_name, fail_idx = name, tuple(int(i) for i in np.unravel_index(j, p.shape))
    if fail_name is not None and worst_name is not None:
        fail_name, fail_idx = worst_name, tuple(int(i) for i in worst_idx)
    return GradCheckReport(worst, fail_name, fail_idx, checked, tol)
