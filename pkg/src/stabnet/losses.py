"""Supervised and unsupervised losses over replica groups of predictions.

Predictions are post-softmax probability vectors. A prediction stack for one
sample is a ``[n, C]`` tensor (n passes of the same sample); a whole batch of
groups is ``[G, n, C]`` and the unsupervised losses then return the sum over
groups.

transformation/stability (TS):
    sum over pairs j < k of ||f^j - f^k||^2

mutual-exclusivity (ME):
    sum over passes j of  -sum_k f_k^j * prod_{l != k} (1 - f_l^j)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import BatchError, NumericError, ParameterError
from .tensor import Tensor, make_node


@dataclass(frozen=True)
class LossWeights:
    """``lambda1`` weighs mutual-exclusivity, ``lambda2`` transformation/stability."""

    lambda1: float = 0.1
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ParameterError(f"{name} must be finite and >= 0, got {v}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.lambda1 * factor, self.lambda2 * factor)


def prediction_stack(preds: Sequence[Tensor] | Tensor) -> Tensor:
    """Stack n per-pass vectors ``[C]`` into one ``[n, C]`` tensor (differentiably)."""
    if isinstance(preds, Tensor):
        return preds
    preds = list(preds)
    if len(preds) < 2:
        raise ParameterError(f"a prediction stack needs n >= 2 passes, got {len(preds)}")
    shape = preds[0].shape
    if any(p.shape != shape for p in preds) or len(shape) != 1:
        raise BatchError(f"stack members must all be [C] vectors, got {[p.shape for p in preds]}")
    data = np.stack([p.data for p in preds])
    return make_node(data, preds, lambda g: tuple(g[j] for j in range(len(preds))), "stack")


def _check_stack(stack: Tensor, need_pairs: bool) -> None:
    if stack.ndim not in (2, 3):
        raise ParameterError(f"prediction stack must be [n, C] or [G, n, C], got {stack.shape}")
    n, c = stack.shape[-2:]
    if c < 2:
        raise ParameterError(f"need C >= 2 classes, got {c}")
    if need_pairs and n < 2:
        raise ParameterError(f"transformation/stability loss needs n >= 2 passes, got {n}")


def _finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{what} is not finite ({value})")


def ts_loss(preds, normalize_pairs: bool = False) -> Tensor:
    """Sum of squared distances over all unordered pairs of passes.

    Gradient w.r.t. pass j is 2 * sum_{k != j} (f^j - f^k) = 2 * (n f^j - sum_k f^k).
    ``normalize_pairs`` divides by the pair count n(n-1)/2.
    """
    stack = prediction_stack(preds)
    _check_stack(stack, need_pairs=True)
    f = stack.data.astype(np.float64)
    n = f.shape[-2]
    diff = f[..., :, None, :] - f[..., None, :, :]
    # every unordered pair appears twice in the full n x n table
    total = 0.5 * np.sum(diff * diff)
    norm = 2.0 / (n * (n - 1)) if normalize_pairs else 1.0
    total *= norm
    _finite(total, "transformation/stability loss")

    def backward(g):
        grad = 2.0 * (n * f - f.sum(axis=-2, keepdims=True)) * (norm * float(g))
        return (grad.astype(stack.data.dtype),)

    return make_node(np.asarray(total, dtype=stack.data.dtype), (stack,), backward, "ts_loss")


def _exclusive_prod(u: np.ndarray) -> np.ndarray:
    """out[..., k] = prod_{l != k} u[..., l] without division."""
    ones = np.ones_like(u[..., :1])
    prefix = np.cumprod(np.concatenate([ones, u[..., :-1]], axis=-1), axis=-1)
    suffix = np.cumprod(np.concatenate([ones, u[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return prefix * suffix


def me_terms(f: np.ndarray) -> np.ndarray:
    """Per-pass mutual-exclusivity value for probability rows ``f[..., C]``."""
    f = np.asarray(f, dtype=np.float64)
    return -np.sum(f * _exclusive_prod(1.0 - f), axis=-1)


def me_loss(preds) -> Tensor:
    """Mutual-exclusivity loss summed over all passes (and groups).

    d/df_m = -prod_{l != m}(1 - f_l) + sum_{k != m} f_k prod_{l not in {k, m}} (1 - f_l)
    """
    stack = prediction_stack(preds)
    _check_stack(stack, need_pairs=False)
    f = stack.data.astype(np.float64)
    total = float(np.sum(me_terms(f)))
    _finite(total, "mutual-exclusivity loss")

    def backward(g):
        u = 1.0 - f
        c = f.shape[-1]
        # tile u so row m has u_m replaced by 1; exclusive products of row m
        # then give prod over l not in {k, m} at column k
        tiled = np.repeat(u[..., None, :], c, axis=-2)
        diag = np.arange(c)
        tiled[..., diag, diag] = 1.0
        pair = _exclusive_prod(tiled)  # [..., m, k]
        pair[..., diag, diag] = 0.0
        grad = -_exclusive_prod(u) + np.einsum("...mk,...k->...m", pair, f)
        return ((grad * float(g)).astype(stack.data.dtype),)

    return make_node(np.asarray(total, dtype=stack.data.dtype), (stack,), backward, "me_loss")


def combined_unsup_loss(preds, w: LossWeights, normalize_pairs: bool = False) -> Tensor:
    """lambda1 * ME + lambda2 * TS."""
    stack = prediction_stack(preds)
    return tc.add(tc.scale(me_loss(stack), w.lambda1), tc.scale(ts_loss(stack, normalize_pairs), w.lambda2))


def cross_entropy(pred: Tensor, label, mask=None) -> Tensor:
    """Mean of -ln(pred[label]) over rows (``pred`` is [C] or [B, C]).

    ``mask`` (bool per row) restricts the mean to selected rows. The log uses
    pred clamped at 1e-12. When ``pred`` came straight out of :func:`softmax`,
    the gradient is sent to the logits in fused form, (p - onehot) / rows.
    """
    single = pred.ndim == 1
    probs = pred.data[None] if single else pred.data
    if probs.ndim != 2:
        raise ParameterError(f"cross_entropy expects [C] or [B, C], got {pred.shape}")
    B, C = probs.shape
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (B,):
        raise ParameterError(f"expected {B} labels, got shape {labels.shape}")
    rows = np.ones(B, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any((labels[rows] < 0) | (labels[rows] >= C)):
        raise ParameterError(f"label out of range [0, {C})")
    count = int(rows.sum())
    if count == 0:
        return make_node(np.zeros((), dtype=probs.dtype), (pred,), lambda g: (None,), "cross_entropy")
    safe = np.where(rows, labels, 0)
    picked = probs[np.arange(B), safe].astype(np.float64)
    value = float(-np.sum(np.log(np.maximum(picked[rows], 1e-12))) / count)
    _finite(value, "cross-entropy")

    onehot = np.zeros_like(probs)
    onehot[np.arange(B), safe] = 1.0
    weight = (rows / count).astype(probs.dtype)[:, None]

    if pred.op == "softmax" and pred._parents:
        logits = pred._parents[0]

        def fused(g):
            grad = (probs - onehot) * weight * g
            return (grad[0] if single else grad,)

        return make_node(np.asarray(value, dtype=probs.dtype), (logits,), fused, "cross_entropy")

    def backward(g):
        grad = -onehot / np.maximum(probs, 1e-12) * weight * g
        return (grad[0] if single else grad,)

    return make_node(np.asarray(value, dtype=probs.dtype), (pred,), backward, "cross_entropy")


@dataclass
class ObjectiveParts:
    """Scalar pieces of one batch objective (plain floats, for logging)."""

    objective: float
    sup: float
    ts: float
    me: float


def batch_objective(probs: Tensor, group_labels, n: int, w: LossWeights,
                    normalize_pairs: bool = False) -> tuple[Tensor, ObjectiveParts]:
    """Supervised + unsupervised objective over a replica batch.

    ``probs`` is [G*n, C], group-major (rows g*n .. g*n+n-1 are the passes of
    group g). ``group_labels`` has one entry per group, -1 for unlabeled.

    objective = mean cross-entropy over all labeled replicas
                + (1/G) * sum over every group of (lambda1*ME + lambda2*TS)

    ``ts``/``me`` in the returned parts are the raw per-group means (unweighted).
    """
    labels = np.asarray(group_labels, dtype=np.int64)
    if probs.ndim != 2:
        raise BatchError(f"batch predictions must be [G*n, C], got {probs.shape}")
    R, C = probs.shape
    G = labels.shape[0]
    if n < 2 or G == 0 or R != G * n:
        raise BatchError(f"{R} prediction rows cannot form {G} groups of {n} replicas")

    row_labels = np.repeat(labels, n)
    labeled = row_labels >= 0
    sup = cross_entropy(probs, np.where(labeled, row_labels, 0), mask=labeled)

    groups = tc.reshape(probs, (G, n, C))
    ts = ts_loss(groups, normalize_pairs)
    me = me_loss(groups)
    unsup = tc.add(tc.scale(me, w.lambda1 / G), tc.scale(ts, w.lambda2 / G))
    total = tc.add(sup, unsup)
    parts = ObjectiveParts(float(total.data), float(sup.data), float(ts.data) / G, float(me.data) / G)
    _finite(parts.objective, "batch objective")
    return total, parts
