"""Randomized finite-difference checks for every loss and layer kind.

Each trial draws a fresh random problem (stack size n in {2..5}, classes C in
{2, 5, 10} for the losses) and returns the largest relative gradient error
over all differentiable inputs of that problem.

Inputs near non-differentiable points are avoided by construction: relu
inputs keep |x| >= 0.05, and randpool inputs are a permutation of evenly
spaced values so no two window entries lie within 2*eps of each other.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers
from . import tensor as tc
from .errors import ParameterError
from .losses import LossWeights, combined_unsup_loss, cross_entropy, me_loss, ts_loss
from .rng import RngStreams
from .tensor import Tensor

TOLERANCE = 1e-3
LAYER_KINDS = layers.KINDS
CHECKS = ("ts", "me", "combined", "xent", *(f"layer:{k}" for k in LAYER_KINDS))


def _simplex(gen: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return gen.dirichlet(np.ones(shape[-1]), size=shape[:-1])


def _stack_shape(gen) -> tuple[int, int]:
    return int(gen.integers(2, 6)), int(gen.choice([2, 5, 10]))


def _projection(gen, shape) -> np.ndarray:
    return gen.uniform(-1.0, 1.0, size=shape)


def _weighted_sum(t: Tensor, r: np.ndarray) -> Tensor:
    return tc.sum(tc.mul(t, Tensor(r)))


def _check_all(f: Callable[..., Tensor], inputs: list[np.ndarray], eps: float) -> float:
    """Max error of grad_check over each input, holding the others fixed."""
    worst = 0.0
    for i in range(len(inputs)):
        def fi(t, i=i):
            args = [t if j == i else Tensor(a) for j, a in enumerate(inputs)]
            return f(*args)
        worst = max(worst, tc.grad_check(fi, inputs[i], eps))
    return worst


def trial(check: str, gen: np.random.Generator, eps: float = 1e-3) -> float:
    """Run one randomized gradient check and return its max relative error."""
    if check not in CHECKS:
        raise ParameterError(f"unknown check {check!r}; expected one of {', '.join(CHECKS)}")
    if check in ("ts", "me", "combined"):
        n, c = _stack_shape(gen)
        x = _simplex(gen, (n, c))
        if check == "ts":
            return tc.grad_check(ts_loss, x, eps)
        if check == "me":
            return tc.grad_check(me_loss, x, eps)
        w = LossWeights(0.1, 1.0)
        return tc.grad_check(lambda t: combined_unsup_loss(t, w), x, eps)

    if check == "xent":
        n, c = _stack_shape(gen)
        logits = gen.uniform(-2, 2, size=(n, c))
        labels = gen.integers(0, c, size=n)
        return tc.grad_check(lambda t: cross_entropy(tc.softmax(t), labels), logits, eps)

    kind = check.split(":", 1)[1]
    if kind == "conv":
        b, cin, cout = int(gen.integers(1, 3)), int(gen.integers(1, 3)), int(gen.integers(1, 4))
        k, stride, pad = int(gen.choice([1, 2, 3])), int(gen.integers(1, 3)), int(gen.integers(0, 2))
        h = int(gen.integers(k, 7))
        x = gen.uniform(-2, 2, size=(b, cin, h, h))
        kern = gen.uniform(-2, 2, size=(cout, cin, k, k))
        oh = tc.conv_output_size(h, k, stride, pad)
        r = _projection(gen, (b, cout, oh, oh))
        return _check_all(lambda xt, kt: _weighted_sum(tc.conv2d(xt, kt, stride, pad), r), [x, kern], eps)
    if kind == "fc":
        b, fin, fout = (int(v) for v in gen.integers(1, 6, size=3))
        x, w, bias = gen.uniform(-2, 2, (b, fin)), gen.uniform(-2, 2, (fin, fout)), gen.uniform(-2, 2, fout)
        r = _projection(gen, (b, fout))
        return _check_all(lambda xt, wt, bt: _weighted_sum(tc.add_bias(tc.matmul(xt, wt), bt), r), [x, w, bias], eps)
    if kind == "relu":
        shape = (int(gen.integers(1, 4)), int(gen.integers(2, 8)))
        x = gen.uniform(0.05, 2.0, size=shape) * gen.choice([-1.0, 1.0], size=shape)
        r = _projection(gen, shape)
        return tc.grad_check(lambda t: _weighted_sum(tc.relu(t), r), x, eps)
    if kind == "dropout":
        shape = (int(gen.integers(1, 4)), int(gen.integers(2, 10)))
        x = gen.uniform(-2, 2, size=shape)
        p = float(gen.uniform(0.1, 0.7))
        seed = int(gen.integers(0, 2**31))
        r = _projection(gen, shape)

        def f(t):
            mode = layers.StochasticMode.stochastic(seed)
            return _weighted_sum(layers.dropout_forward(t, p, mode), r)

        return tc.grad_check(f, x, eps)
    if kind == "randpool":
        b, c = int(gen.integers(1, 3)), int(gen.integers(1, 3))
        window, stride = int(gen.integers(2, 4)), int(gen.integers(1, 4))
        h = int(gen.integers(window, window + 5))
        size = b * c * h * h
        x = gen.permutation(np.linspace(-2, 2, size)).reshape(b, c, h, h)
        seed = int(gen.integers(0, 2**31))
        oh = (h - window) // stride + 1
        r = _projection(gen, (b, c, oh, oh))

        def f(t):
            mode = layers.StochasticMode.stochastic(seed)
            return _weighted_sum(layers.randpool_forward(t, window, stride, mode), r)

        return tc.grad_check(f, x, eps)
    # softmax
    n, c = _stack_shape(gen)
    x = gen.uniform(-2, 2, size=(n, c))
    r = _projection(gen, (n, c))
    return tc.grad_check(lambda t: _weighted_sum(tc.softmax(t), r), x, eps)


def run(check: str, trials: int = 100, eps: float = 1e-3, seed: int = 0) -> list[float]:
    """``trials`` independent checks; trial i uses stream ``gradcheck/<check>`` at key i."""
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    streams = RngStreams(seed)
    return [trial(check, streams.fresh(f"gradcheck/{check}", i), eps) for i in range(trials)]
