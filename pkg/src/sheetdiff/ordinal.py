"""Cumulative-target ordinal classification: K classes as K-1 binary thresholds."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, bce_with_logits


def ordinal_encode(c: int, k: int) -> np.ndarray:
    """Binary targets ``t_i = 1[c > i]`` for i in 0..k-2."""
    if k < 2:
        raise ValueError(f"ordinal targets need at least 2 classes, got K={k}")
    if not 0 <= c < k:
        raise ValueError(f"class {c} outside [0, {k})")
    return (c > np.arange(k - 1)).astype(np.float64)


def ordinal_encode_batch(classes, k: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    if k < 2:
        raise ValueError(f"ordinal targets need at least 2 classes, got K={k}")
    if classes.size and (classes.min() < 0 or classes.max() >= k):
        raise ValueError(f"class labels outside [0, {k})")
    return (classes[:, None] > np.arange(k - 1)[None, :]).astype(np.float64)


def ordinal_decode(probs, threshold: float = 0.5) -> int:
    """Number of thresholds whose probability exceeds ``threshold``."""
    return int(np.count_nonzero(np.asarray(probs) > threshold))


def ordinal_decode_batch(probs, threshold: float = 0.5) -> np.ndarray:
    return np.count_nonzero(np.asarray(probs) > threshold, axis=-1).astype(np.int64)


def ordinal_loss(logits: Tensor, c, k: int | None = None) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against the cumulative targets.

    ``logits`` is ``[K-1]`` with a scalar class, or ``[B, K-1]`` with a class
    per row; the mean runs over every threshold of every row.
    """
    k = logits.shape[-1] + 1 if k is None else k
    if logits.ndim == 1:
        targets = ordinal_encode(int(c), k)
    else:
        targets = ordinal_encode_batch(c, k)
    return bce_with_logits(logits, targets)
