"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients record their parents and a closure mapping the output gradient to
parent gradients; :func:`backward` walks the recorded graph once in reverse
topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import Stream

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
MASK_VALUE = -1e9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result, recording a graph node when any parent needs grad.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return make_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} of shape {a.shape} has odd size")
    x, gate = np.split(a.data, 2, axis=axis)
    s = _sigmoid(gate)

    def back(g):
        return (np.concatenate([g * s, g * x * s * (1.0 - s)], axis=axis),)

    return make_op(x * s, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return make_op(y, (a,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def dropout(a: Tensor, rate: float, stream: Stream | None, mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout.  ``mask`` (0/1 array) overrides the stream draw."""
    if rate <= 0.0 and mask is None:
        return a
    keep = 1.0 - rate
    if mask is None:
        if stream is None:
            raise ValueError("dropout needs an explicit PRNG stream")
        mask = stream.keep_mask(keep, a.shape)
    scale = mask / keep
    return make_op(a.data * scale, (a,), lambda g: (g * scale,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ------------------------------------------------------------------ reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ------------------------------------------------------------------- structure


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    return make_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_op(weight.data[ids], (weight,), back)


def splice(a: Tensor, offsets: Sequence[int]) -> Tensor:
    """Context splicing along time: (B, T, C) -> (B, T, C * len(offsets)).

    Frames outside [0, T) read as zeros.
    """
    B, T, C = a.shape
    parts = []
    for o in offsets:
        shifted = np.zeros_like(a.data)
        if o >= 0:
            if o < T:
                shifted[:, : T - o] = a.data[:, o:]
        elif -o < T:
            shifted[:, -o:] = a.data[:, : T + o]
        parts.append(shifted)

    def back(g):
        gx = np.zeros_like(a.data)
        for k, o in enumerate(offsets):
            gk = g[:, :, k * C : (k + 1) * C]
            if o >= 0:
                if o < T:
                    gx[:, o:] += gk[:, : T - o]
            elif -o < T:
                gx[:, : T + o] += gk[:, -o:]
        return (gx,)

    return make_op(np.concatenate(parts, axis=-1), (a,), back)


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), back)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias) over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back)


# ------------------------------------------------------------------ norm layers


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    n = x.shape[-1]

    def back(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(0))
        return grads

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return make_op(out, parents, back)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, mask: np.ndarray | None = None,
                     eps: float = BATCH_NORM_EPS) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch statistics over every axis but the last, restricted to ``mask``.

    Returns the normalized tensor (zero at masked-out positions) and the
    batch mean and variance used.
    """
    C = x.shape[-1]
    xs = x.data.reshape(-1, C)
    w = np.ones((xs.shape[0], 1)) if mask is None else mask.reshape(-1, 1).astype(np.float64)
    n = w.sum()
    if n < 1:
        raise ShapeError("batch_norm: no valid frames")
    mu = (w * xs).sum(0) / n
    xc = xs - mu
    var = (w * xc * xc).sum(0) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv * w
    out = (xhat * gamma.data + beta.data) * w

    def back(g):
        g = g.reshape(-1, C) * w
        gxhat = g * gamma.data
        gx = w * inv / n * (n * gxhat - gxhat.sum(0) - xhat * (gxhat * xhat).sum(0))
        return gx.reshape(x.shape), (g * xhat).sum(0), g.sum(0)

    return make_op(out.reshape(x.shape), (x, gamma, beta), back), mu, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                    running_var: np.ndarray, eps: float = BATCH_NORM_EPS) -> Tensor:
    inv = 1.0 / np.sqrt(running_var + eps)
    return add(mul(mul(sub(x, running_mean), inv), gamma), beta)


# -------------------------------------------------------------- convolutions


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    patches = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # patches: (B, Cin, Ho, Wo, kh, kw)
    out = np.einsum("bchwij,ocij->bohw", patches, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gw = np.einsum("bohw,bchwij->ocij", g, patches, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += \
                    np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution over time. x: (B, T, C); weight: (K, C), K odd."""
    K, C = weight.shape
    if x.shape[-1] != C or K % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with weight {weight.shape}")
    B, T, _ = x.shape
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for k in range(K):
        out += xp[:, k : k + T] * weight.data[k]
    if bias is not None:
        out = out + bias.data

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for k in range(K):
            gxp[:, k : k + T] += g * weight.data[k]
            gw[k] = (g * xp[:, k : k + T]).sum(axis=(0, 1))
        gx = gxp[:, pad : pad + T]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back)


# ---------------------------------------------------------------- backprop


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class GradMap(dict):
    """Leaf tensor -> gradient array (keyed by identity)."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(t))

    def __contains__(self, t) -> bool:
        return dict.__contains__(self, id(t))

    def get(self, t: Tensor, default=None):
        return dict.get(self, id(t), default)


def backward(loss: Tensor) -> GradMap:
    """Gradients of a scalar ``loss`` for every leaf that requires grad.

    Leaf ``.grad`` fields are overwritten with the fresh gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result = GradMap()
    if not loss.requires_grad:
        return result
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            dict.__setitem__(result, id(node), g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    analytic = backward(f(x)).get(x)
    if analytic is None:
        analytic = np.zeros_like(point)
    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(Tensor(point.copy())).item()
        flat[i] = old - step
        fm = f(Tensor(point.copy())).item()
        flat[i] = old
        numeric = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      max_coords: int | None = None) -> float:
    """:func:`grad_check` for leaf parameters perturbed in place.

    ``max_coords`` limits the check to the first coordinates of each parameter.
    """
    grads = backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        analytic = np.zeros_like(p.data) if analytic is None else analytic.reshape(-1)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)  # a view: edits perturb the parameter
        n = flat.size if max_coords is None else min(flat.size, max_coords)
        for i in range(n):
            old = flat[i]
            flat[i] = old + step
            fp = loss_fn().item()
            flat[i] = old - step
            fm = loss_fn().item()
            flat[i] = old
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
