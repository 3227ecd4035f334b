"""Central finite-difference gradient checks for the tensor engine."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NondeterministicModelError(RuntimeError):
    """Two forward passes with identical parameters disagreed."""


ModelFn = Callable[[], "Tensor | tuple[Tensor, np.ndarray]"]


def _evaluate(model_fn: ModelFn) -> tuple[Tensor, np.ndarray | None]:
    out = model_fn()
    if isinstance(out, tuple):
        return out[0], np.asarray(out[1])
    return out, None


def finite_diff_check(
    model_fn: ModelFn,
    params: Sequence[Tensor],
    eps: float = 1e-5,
    coords_per_param: int = 10,
    rng: np.random.Generator | None = None,
    return_details: bool = False,
):
    """Compare backprop gradients against central differences on sampled coordinates.

    ``model_fn`` rebuilds the graph from ``params`` and returns a scalar loss,
    or ``(loss, kinks)`` where ``kinks`` holds the pre-activations of any
    piecewise-linear units. A coordinate whose ±eps perturbation flips the sign
    of any kink value straddles a non-differentiable point and is skipped.

    Returns the max over checked coordinates of
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    first, _ = _evaluate(model_fn)
    second, _ = _evaluate(model_fn)
    if not np.array_equal(first.data, second.data):
        raise NondeterministicModelError(
            "model_fn returned different losses on two identical passes; "
            "put stochastic regularizers in eval mode or freeze their masks"
        )

    for p in params:
        p.requires_grad = True
        p.grad = None
    loss, _ = _evaluate(model_fn)
    T.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    checked = skipped = 0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        count = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + eps
            lp, kp = _evaluate(model_fn)
            flat[idx] = original - eps
            lm, km = _evaluate(model_fn)
            flat[idx] = original
            if kp is not None and np.any(np.sign(kp) != np.sign(km)):
                skipped += 1
                continue
            cd = (lp.item() - lm.item()) / (2.0 * eps)
            a = grad.reshape(-1)[idx]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
            checked += 1
    for p in params:
        p.grad = None
    if return_details:
        return worst, checked, skipped
    return worst


# ------------------------------------------------------------------ op suite


def _probe_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(weights)))


def _case(op: str, rng: np.random.Generator):
    """Build (model_fn, params) exercising one op on random inputs."""
    n = rng.standard_normal
    if op == "conv2d":
        x, w, b = Tensor(n((2, 3, 7, 6))), Tensor(n((4, 3, 3, 3))), Tensor(n(4))
        r = n((2, 4, 4, 3))
        return (lambda: _probe_loss(T.conv2d(x, w, b, stride=2, padding=1), r)), [x, w, b]
    if op == "relu":
        x = Tensor(n((3, 5)))
        r = n((3, 5))
        return (lambda: (_probe_loss(T.relu(x), r), x.data.copy())), [x]
    if op == "maxpool2d":
        x = Tensor(n((2, 3, 5, 6)))
        r = n((2, 3, 2, 3))

        def fn():
            # window winners are the kinks of max pooling
            return _probe_loss(T.maxpool2d(x, 2), r), T.pool_winner_pattern(x.data)

        return fn, [x]
    if op in ("batchnorm2d", "batchnorm2d_eval"):
        training = op == "batchnorm2d"
        x, g, b = Tensor(n((3, 4, 3, 2))), Tensor(1.0 + 0.1 * n(4)), Tensor(n(4))
        rm0, rv0 = n(4), 1.0 + rng.random(4)
        r = n((3, 4, 3, 2))

        def fn():
            rm, rv = rm0.copy(), rv0.copy()
            return _probe_loss(T.batchnorm2d(x, g, b, rm, rv, training=training), r)

        return fn, [x, g, b]
    if op == "flatten":
        x = Tensor(n((2, 3, 2)))
        r = n((2, 6))
        return (lambda: _probe_loss(T.flatten(x), r)), [x]
    if op == "linear":
        x, w, b = Tensor(n((4, 5))), Tensor(n((3, 5))), Tensor(n(3))
        r = n((4, 3))
        return (lambda: _probe_loss(T.linear(x, w, b), r)), [x, w, b]
    if op == "mul":
        a, c = Tensor(n((3, 4))), Tensor(n((1, 4)))
        r = n((3, 4))
        return (lambda: _probe_loss(T.mul(a, c), r)), [a, c]
    if op == "add":
        a, c = Tensor(n((3, 4))), Tensor(n(4))
        r = n((3, 4))
        return (lambda: _probe_loss(T.add(a, c), r)), [a, c]
    if op == "l2_normalize":
        x = Tensor(n((4, 6)))
        r = n((4, 6))
        return (lambda: _probe_loss(T.l2_normalize(x), r)), [x]
    if op == "scale":
        x = Tensor(n((2, 5)))
        r = n((2, 5))
        return (lambda: _probe_loss(T.scale(x, -2.5), r)), [x]
    if op == "softmax_cross_entropy":
        z = Tensor(n((6, 5)))
        labels = rng.integers(0, 5, 6)
        return (lambda: T.softmax_cross_entropy(z, labels)), [z]
    if op == "conv4":
        return _conv4_case(rng)
    raise ValueError(f"no gradient check defined for op {op!r}; known: {', '.join(SUITE_OPS)}")


def _conv4_case(rng: np.random.Generator):
    from .model import Model

    model = Model.conv4(n_classes=5, rng=rng)
    x = rng.random((4, 3, 84, 84))
    labels = np.array([0, 1, 2, 3])
    params = [model.params[name] for name in model.params]

    def fn():
        bufs = {k: v.copy() for k, v in model.buffers.items()}
        feats, kinks = model.backbone_forward_traced(Tensor(x), training=True, buffers=bufs)
        loss = T.softmax_cross_entropy(model.head_logits(feats), labels)
        return loss, kinks

    return fn, params


SUITE_OPS = (
    "conv2d",
    "relu",
    "maxpool2d",
    "batchnorm2d",
    "batchnorm2d_eval",
    "flatten",
    "linear",
    "mul",
    "add",
    "l2_normalize",
    "scale",
    "softmax_cross_entropy",
    "conv4",
)


@dataclass
class OpCheck:
    op: str
    max_rel_error: float
    checked: int
    skipped: int
    seconds: float

    def passed(self, threshold: float) -> bool:
        return self.checked > 0 and self.max_rel_error < threshold


def run_suite(ops: Sequence[str] | None = None, seed: int = 0, eps: float = 1e-5) -> list[OpCheck]:
    results = []
    for op in ops or SUITE_OPS:
        rng = np.random.default_rng([seed, SUITE_OPS.index(op) if op in SUITE_OPS else 99])
        fn, params = _case(op, rng)
        coords = 4 if op == "conv4" else 10
        t0 = time.perf_counter()
        err, checked, skipped = finite_diff_check(fn, params, eps, coords, rng, return_details=True)
        results.append(OpCheck(op, err, checked, skipped, time.perf_counter() - t0))
    return results
