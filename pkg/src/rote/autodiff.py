"""A small reverse-mode autodiff layer over numpy arrays.

Only the operations the recommender backbone needs are provided. Each op
builds a :class:`Tensor` that remembers its parents and a closure that pushes
the output gradient back to them. :func:`backward` orders the graph into a
tape (topological order) and replays it in reverse.

Broadcasting is deliberately narrow: equal shapes, a trailing-dims operand
(bias/gain vectors), or a 2-D weight on the right of ``matmul``. Anything else
raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .rote_core import rotate_half


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        backward(self, grad)

    # operator sugar, used sparingly by the backbone
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (evaluation, latency measurement)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _const(x, like: Tensor) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological (execution) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None):
    if not root.requires_grad:
        raise ValueError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise ShapeError("implicit gradient only defined for scalar outputs")
        grad = np.ones_like(root.data)
    tape = build_tape(root)
    root._accumulate(np.asarray(grad, dtype=root.dtype))
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free interior gradients; leaves keep theirs
    for node in tape:
        if node._parents:
            node.grad = None


# ---------------------------------------------------------------- structural


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_trailing(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(b_shape) <= len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return
    raise ShapeError(f"{op}: unsupported shapes {a_shape} and {b_shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing dimensions of ``a``."""
    _check_trailing(a.shape, b.shape, "add")

    def fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _node(a.data + b.data, (a, b), fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. ``b`` is a same-shape Tensor or a constant array."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

        def fn(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return _node(a.data * b.data, (a, b), fn)

    c = _const(b, a)
    try:
        out = a.data * c
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    if out.shape != a.shape:
        raise ShapeError(f"mul: constant of shape {c.shape} would broadcast {a.shape}")
    return _node(out, (a,), lambda g: a._accumulate(g * c))


def multiply_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: a._accumulate(g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")

    def fn(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k, m = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: a._accumulate(np.transpose(g, inverse)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(src)))


def tensor_sum(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape).copy()))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _node(np.where(keep, a.data, 0), (a,), lambda g: a._accumulate(g * keep))


# ---------------------------------------------------------------- layers


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax; ``mask`` is True where an entry may receive weight."""
    z = x.data
    if mask is not None:
        try:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        except ValueError:
            raise ShapeError(f"softmax mask {np.shape(mask)} does not match {z.shape}") from None
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax row with every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)

    return _node(out, (x, gain, bias), fn)


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(gt)

    return _node(table.data[ids], (table,), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | int | None) -> Tensor:
    """Inverted dropout. ``rng`` is a Generator or an integer seed."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


def cross_entropy_logits(
    logits: Tensor,
    targets,
    weights: np.ndarray | None = None,
    column_mask: np.ndarray | None = None,
) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is ``(V,)`` or ``(N, V)``. ``column_mask`` marks the classes that
    take part in the softmax (e.g. False for the padding id).
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    if z2.ndim != 2:
        raise ShapeError("cross_entropy_logits expects (V,) or (N, V) logits")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z2.shape[0]:
        raise ShapeError("one target per logit row required")
    if t.size and (t.min() < 0 or t.max() >= z2.shape[1]):
        raise IndexError("target id out of range")
    w = np.ones(t.shape[0], dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross entropy over zero weight")
    if column_mask is not None:
        z2 = np.where(np.asarray(column_mask, dtype=bool), z2, -np.inf)
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = logsum - shifted[rows, t]
    loss = np.asarray((w * nll).sum() / total, dtype=z.dtype)

    def fn(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, t] -= 1.0
        grad = p * (w / total)[:, None] * g
        logits._accumulate(grad.reshape(z.shape))

    return _node(loss, (logits,), fn)


def rotary_fuse(x: Tensor, tables) -> Tensor:
    """Weighted sum of rotary transforms of ``x``.

    ``tables`` holds ``(alpha, cos, sin)`` with cos/sin broadcastable to ``x``
    (angles are constants). Each rotation is orthogonal, so its adjoint is the
    rotation by the negated angle: ``g*cos - rotate_half(g*sin)``.
    """
    xd = x.data
    rot = rotate_half(xd)
    out = np.zeros_like(xd)
    for alpha, cos, sin in tables:
        out += alpha * (xd * cos + rot * sin)
    if out.shape != x.shape:
        raise ShapeError("rotary tables broadcast beyond the input shape")

    def fn(g):
        gx = np.zeros_like(g)
        for alpha, cos, sin in tables:
            gx += alpha * (g * cos - rotate_half(g * sin))
        x._accumulate(gx)

    return _node(out, (x,), fn)


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The error for each input is ``|analytic - numeric| / max(|analytic| + |numeric|, floor)``
    in the L2 norm; the report keeps the worst input. The floor keeps
    gradients that are identically zero (e.g. a key bias under softmax) from
    turning round-off into a relative error of 1.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    errors = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data)
            flat[i] = orig - eps
            fm = float(f(*inputs).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
        err = float(np.linalg.norm(analytic - numeric) / denom)
        errors.append(err)
    for t in inputs:
        t.grad = None
    return GradCheckReport(max(errors) if errors else 0.0, errors, tol)
