"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of primitives a LeNet-style CNN needs are provided:
valid cross-correlation, affine layers, 2x2 max pooling, relu, softmax
cross-entropy and a straight-through quantiser hook.  Every op records its
parents and a closure computing input gradients from the output gradient;
:func:`backward` walks the recorded graph in reverse topological order.

Arrays are float32 by default.  Float64 inputs are carried through unchanged,
which the gradient checks use to keep finite-difference noise out of the way.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "conv2d",
    "dense",
    "maxpool2",
    "relu",
    "flatten",
    "add",
    "mul",
    "sum_all",
    "dot_const",
    "softmax_cross_entropy",
    "straight_through",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``axes`` names the offending axes."""

    def __init__(self, op: str, message: str, axes: Sequence[str] = ()):
        self.op = op
        self.axes = tuple(axes)
        where = f" (axes: {', '.join(self.axes)})" if self.axes else ""
        super().__init__(f"{op}: {message}{where}")


class GraphError(ValueError):
    pass


BackwardFn = Callable[[np.ndarray, tuple], tuple]


class Tensor:
    """An n-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        parents: tuple[Tensor, ...] = (),
        backward_fn: BackwardFn | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=fn)


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ")

    def fn(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return _make(a.data + b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def fn(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _make(ad * bd, (a, b), fn)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def fn(g, needs):
        return (np.full(shape, g, dtype=dtype),)

    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), fn)


def dot_const(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` for a constant array ``weights``."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ShapeError("dot_const", f"shapes {x.shape} and {w.shape} differ")

    def fn(g, needs):
        return (g * w,)

    return _make(np.asarray((x.data * w).sum(), dtype=x.data.dtype), (x,), fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0

    def fn(g, needs):
        return (g * active,)

    return _make(np.where(active, x.data, 0).astype(x.data.dtype), (x,), fn)


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def fn(g, needs):
        return (g.reshape(shape),)

    return _make(x.data.reshape(shape[0], -1), (x,), fn)


def straight_through(
    x: Tensor, transform: Callable[[np.ndarray], np.ndarray], passband: tuple[float, float] | None = None
) -> Tensor:
    """Apply ``transform`` forward; pass gradients through unchanged.

    With ``passband`` the gradient is zeroed where the input lies outside
    ``[low, high]`` (saturated values do not respond to their input).
    """
    x = _as_tensor(x)

    def fn(g, needs):
        if passband is None:
            return (g,)
        return (g * ((x.data >= passband[0]) & (x.data <= passband[1])),)

    out = np.asarray(transform(x.data), dtype=x.data.dtype)
    return _make(out, (x,), fn)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("dense", "input and weight must be 2-d", ("input", "weight"))
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            "dense",
            f"input features {x.shape[1]} != weight rows {weight.shape[0]}",
            ("input[1]", "weight[0]"),
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(
            "dense", f"bias shape {bias.shape} != ({weight.shape[1]},)", ("bias[0]", "weight[1]")
        )
    xd, wd = x.data, weight.data

    def fn(g, needs):
        return (
            g @ wd.T if needs[0] else None,
            xd.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _make(xd @ wd + bias.data, (x, weight, bias), fn)


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> None:
    if x.ndim != 4:
        raise ShapeError("conv2d", f"input must be NCHW, got {x.ndim}-d", ("input",))
    if w.ndim != 4:
        raise ShapeError("conv2d", f"kernel must be OIHW, got {w.ndim}-d", ("kernel",))
    if stride < 1:
        raise ShapeError("conv2d", f"stride must be positive, got {stride}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            "conv2d",
            f"input channels {x.shape[1]} != kernel channels {w.shape[1]}",
            ("input[C]", "kernel[I]"),
        )
    bad = [
        name
        for name, n, k in (("H", x.shape[2], w.shape[2]), ("W", x.shape[3], w.shape[3]))
        if n < k
    ]
    if bad:
        raise ShapeError(
            "conv2d",
            f"input spatial {x.shape[2:]} smaller than kernel {w.shape[2:]}",
            [f"input[{a}]" for a in bad],
        )
    if b.shape != (w.shape[0],):
        raise ShapeError("conv2d", f"bias shape {b.shape} != ({w.shape[0]},)", ("bias[0]", "kernel[O]"))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation over an NCHW batch."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    xd, wd = x.data, kernel.data
    _check_conv(xd, wd, bias.data, stride)
    n, c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def fn(g, needs):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if needs[1]:
            gw = (gm.T @ cols).reshape(wd.shape)
        if needs[2]:
            gb = gm.sum(axis=0)
        if needs[0]:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gx = np.zeros_like(xd)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, :, i, j]
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, kernel, bias), fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first scan-order element."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("maxpool2", f"input must be NCHW, got {xd.ndim}-d", ("input",))
    n, c, h, w = xd.shape
    odd = [a for a, s in (("H", h), ("W", w)) if s % 2]
    if odd:
        raise ShapeError("maxpool2", f"spatial dims {h}x{w} must be even", [f"input[{a}]" for a in odd])
    win = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g, needs):
        routed = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        gx = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction="sum"`` gives each sample's own loss gradient, which the
    attacks need; training uses the batch mean.
    """
    logits = _as_tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy", f"logits must be N x C, got {z.shape}", ("logits",))
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows", ("labels",))
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = log_softmax(z)
    rows = np.arange(n)
    per_sample = -logp[rows, labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = np.asarray(per_sample.sum() * scale, dtype=z.dtype)

    def fn(g, needs):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g * scale),)

    return _make(loss, (logits,), fn)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``loss`` with respect to each requested leaf.

    Leaves the loss does not depend on get zero gradients.  Asking for an
    interior node that is not part of this graph is an error.
    """
    leaves = list(leaves)
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    order = _topological(loss) if loss.requires_grad else [loss]
    in_graph = {id(t) for t in order}
    for leaf in leaves:
        if id(leaf) not in in_graph and not leaf.is_leaf:
            raise GraphError(f"{leaf!r} is not in the graph of this loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    wanted = {id(t) for t in leaves}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        parent_grads = node.backward_fn(g, needs)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if id(node) not in wanted:
            del grads[id(node)]

    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        out[leaf] = Tensor(np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape))
    return out
