"""Dense float64 tensors with a reverse-mode autodiff tape and an SGD optimizer.

Every op in this module is regularizer-agnostic: masks produced elsewhere enter
the graph through the plain elementwise ``mul`` op.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TRANSFERABLE = "transferable"
TASK_SPECIFIC = "task_specific"
PARTITIONS = (TRANSFERABLE, TASK_SPECIFIC)


class ShapeError(ValueError):
    """An op received inputs whose shapes it cannot combine."""


class TapeError(RuntimeError):
    """Backward was requested on something that is not a live scalar loss."""


def _sabotaged() -> frozenset[str]:
    # Test hook: op names listed here get a deliberately doubled input gradient.
    raw = os.environ.get("WDROP_SABOTAGE_OPS", "")
    return frozenset(s.strip() for s in raw.split(",") if s.strip())


class Tensor:
    """An n-d float64 array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for tests and small graphs
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        if op in _sabotaged():
            inner = backward

            def backward(g, _inner=inner):
                return [None if r is None else 2.0 * r for r in _inner(g)]

        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * active,), "relu")


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"flatten: expected rank >= 2 input, got shape {x.shape}")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return _make(out, (x,), lambda g: (g.reshape(shape),), "flatten")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out_features, in_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, backward, "linear")


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise ``x / max(||x||, eps)`` over the last axis."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    out = x.data / denom

    def backward(g):
        radial = (out * g).sum(axis=-1, keepdims=True)
        return (np.where(clipped, g, g - out * radial) / denom,)

    return _make(out, (x,), backward, "l2_normalize")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Padded B×C×H×W input to B×(C·kh·kw)×(Ho·Wo) patch columns."""
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp} (input {x.shape})")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    wmat = weight.data.reshape(O, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(B, O, Ho * Wo)
        gw = None
        if weight.requires_grad:
            gw = np.zeros((O, C * kh * kw))
            for b in range(B):
                gw += g3[b] @ cols[b].T
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(B, C, kh, kw, Ho, Wo)
            dxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Gradient goes to the first maximal element of each window in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected B×C×H×W input, got shape {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // kernel, W // kernel
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"maxpool2d: kernel {kernel} larger than input {x.shape}")
    v = x.data[:, :, : Ho * kernel, : Wo * kernel].reshape(B, C, Ho, kernel, Wo, kernel)

    if kernel == 2:
        top = np.maximum(v[:, :, :, 0, :, 0], v[:, :, :, 0, :, 1])
        bottom = np.maximum(v[:, :, :, 1, :, 0], v[:, :, :, 1, :, 1])
        out = np.maximum(top, bottom)
        right_top = v[:, :, :, 0, :, 1] > v[:, :, :, 0, :, 0]
        right_bottom = v[:, :, :, 1, :, 1] > v[:, :, :, 1, :, 0]
        lower = bottom > top

        def backward(g):
            gx = np.zeros(x.shape)
            # splitting axes of a slice is always a view, so writes land in gx
            gv = gx[:, :, : Ho * 2, : Wo * 2].reshape(B, C, Ho, 2, Wo, 2)
            upper = g * ~lower
            low = g * lower
            gv[:, :, :, 0, :, 0] = upper * ~right_top
            gv[:, :, :, 0, :, 1] = upper * right_top
            gv[:, :, :, 1, :, 0] = low * ~right_bottom
            gv[:, :, :, 1, :, 1] = low * right_bottom
            return (gx,)

    else:
        win = v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, -1)
        winner = win.argmax(axis=-1)
        out = np.take_along_axis(win, winner[..., None], axis=-1)[..., 0]

        def backward(g):
            gw = np.zeros(win.shape)
            np.put_along_axis(gw, winner[..., None], g[..., None], axis=-1)
            gx = np.zeros(x.shape)
            gx[:, :, : Ho * kernel, : Wo * kernel] = (
                gw.reshape(B, C, Ho, Wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * kernel, Wo * kernel)
            )
            return (gx,)

    return _make(out, (x,), backward, "maxpool2d")


def pool_winner_pattern(x: np.ndarray, kernel: int = 2) -> np.ndarray:
    """Which element wins each pooling window, as ±1 so that a changed winner flips a sign."""
    B, C, H, W = x.shape
    Ho, Wo = H // kernel, W // kernel
    crop = x[:, :, : Ho * kernel, : Wo * kernel]
    win = crop.reshape(B, C, Ho, kernel, Wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, -1)
    return np.where(win == win.max(axis=-1, keepdims=True), 1.0, -1.0).ravel()


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (EMA, unbiased variance). In eval mode the
    running buffers are used and left untouched.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm2d: eps must be positive, got {eps}")
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    B, C, H, W = x.shape
    x3 = x.data.reshape(B, C, H * W)
    if training:
        n = B * H * W
        if n < 2:
            raise ShapeError(f"batchnorm2d: training mode needs more than one value per channel, got {x.shape}")
        mean = x3.sum(axis=(0, 2)) / n
        xhat = x3 - mean[:, None]
        var = np.einsum("bcn,bcn->c", xhat, xhat) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv[:, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)

        def backward(g):
            g3 = g.reshape(B, C, H * W)
            gg = np.einsum("bcn,bcn->c", g3, xhat)
            gb = g3.sum(axis=(0, 2))
            gx = None
            if x.requires_grad:
                gx = xhat * (-gg / n)[:, None]
                gx += g3
                gx -= (gb / n)[:, None]
                gx *= (gamma.data * inv)[:, None]
                gx = gx.reshape(x.shape)
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x3 - running_mean[:, None]) * inv[:, None]

        def backward(g):
            g3 = g.reshape(B, C, H * W)
            gx = (g3 * (gamma.data * inv)[:, None]).reshape(x.shape) if x.requires_grad else None
            return gx, np.einsum("bcn,bcn->c", g3, xhat), g3.sum(axis=(0, 2))

    out = np.multiply(xhat, gamma.data[:, None])
    out += beta.data[:, None]
    return _make(out.reshape(x.shape), (x, gamma, beta), backward, "batchnorm2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return _make(np.array(loss), (logits,), backward, "softmax_cross_entropy")


_OPS: dict[str, Callable[..., Tensor]] = {
    "conv2d": lambda xs, a: conv2d(*xs, stride=a.get("stride", 1), padding=a.get("padding", 0)),
    "relu": lambda xs, a: relu(*xs),
    "maxpool2d": lambda xs, a: maxpool2d(*xs, kernel=a.get("kernel", 2)),
    "batchnorm2d": lambda xs, a: batchnorm2d(
        *xs,
        running_mean=a["running_mean"],
        running_var=a["running_var"],
        training=a.get("training", True),
        momentum=a.get("momentum", 0.1),
        eps=a.get("eps", 1e-5),
    ),
    "flatten": lambda xs, a: flatten(*xs),
    "linear": lambda xs, a: linear(*xs),
    "mul": lambda xs, a: mul(*xs),
    "add": lambda xs, a: add(*xs),
    "l2_normalize": lambda xs, a: l2_normalize(*xs, eps=a.get("eps", 1e-8)),
    "scale": lambda xs, a: scale(*xs, a["factor"]),
}

OP_KINDS = tuple(_OPS)


def forward_op(op_kind: str, inputs: Sequence[Tensor], attrs: Mapping | None = None) -> Tensor:
    """Dispatch one op by name; used by the gradient checker and config-driven graphs."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}; expected one of {', '.join(OP_KINDS)}") from None
    return fn(list(inputs), dict(attrs or {}))


# ---------------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every tensor reachable from ``loss`` that requires it.

    Gradients are accumulated additively, so a leaf used on several paths (or
    across several backward calls without ``zero_grad``) gets the sum.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward called on a tensor that is not on the tape (no input requires grad)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ------------------------------------------------------------------- parameters


class ParamSet:
    """Named parameters, each tagged transferable (w) or task_specific (θ)."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}

    def add(self, name: str, tensor: Tensor, partition: str) -> Tensor:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r} for {name}; expected one of {PARTITIONS}")
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._tensors[name] = tensor
        self._tags[name] = partition
        return tensor

    def remove_prefix(self, prefix: str) -> None:
        for name in [n for n in self._tensors if n.startswith(prefix)]:
            del self._tensors[name], self._tags[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tag(self, name: str) -> str:
        return self._tags[name]

    def names(self, partition: str | None = None) -> list[str]:
        return [n for n in self._tensors if partition is None or self._tags[n] == partition]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: ParamSet, state: SgdState, trainable_filter: str | Iterable[str] | None = None) -> None:
    """One momentum-SGD update, in place, on the filtered parameters.

    ``trainable_filter`` is a partition tag, an explicit list of names, or None
    for every parameter. Parameters outside the filter are not touched.
    """
    if trainable_filter is None:
        names = params.names()
    elif isinstance(trainable_filter, str):
        names = params.names(trainable_filter)
    else:
        names = list(trainable_filter)
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise TapeError(f"sgd_step: no gradient for {', '.join(missing)}")
    for name in names:
        p = params[name]
        step = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        v = state.velocity.get(name)
        if v is None:
            v = np.array(step, dtype=np.float64)
        else:
            if v.shape != p.shape:
                raise ShapeError(f"sgd_step: velocity {v.shape} does not match parameter {name} {p.shape}")
            v = state.momentum * v + step
        state.velocity[name] = v
        p.data = p.data - state.lr * v
