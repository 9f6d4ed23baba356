from __future__ import annotations

import numpy as np

from ..errors import ShapeError

CLAMP_EPS = 1e-7


def weighted_bce(pred, target, w: float = 1.0, eps: float = CLAMP_EPS):
    """Mean positive-weighted binary cross-entropy and its gradient wrt ``pred``.

    loss = -(1/N) * sum(w * y * log(h) + (1 - y) * log(1 - h)), with h the
    prediction clamped to [eps, 1 - eps]. The clamp only guards the logs; the
    gradient is evaluated at the clamped value rather than zeroed.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"weighted_bce: pred shape {pred.shape} != target shape {target.shape}")
    h = np.clip(pred.astype(np.float64), eps, 1 - eps)
    y = target.astype(np.float64)
    n = h.size
    loss = -np.sum(w * y * np.log(h) + (1 - y) * np.log1p(-h)) / n
    grad = -(w * y / h - (1 - y) / (1 - h)) / n
    out_dtype = pred.dtype if np.issubdtype(pred.dtype, np.floating) else np.float64
    return float(loss), grad.astype(out_dtype)


def bce(pred, target, eps: float = CLAMP_EPS) -> float:
    """Plain binary cross-entropy, written out separately as a reference."""
    h = np.clip(np.asarray(pred, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(target, dtype=np.float64)
    return float(-np.mean(y * np.log(h) + (1 - y) * np.log(1 - h)))
