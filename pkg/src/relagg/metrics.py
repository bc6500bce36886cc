"""Mean squared error and base-2 log loss for probabilistic binary predictions."""
from __future__ import annotations

import numpy as np

EPS = 1e-6


def clip(p, eps: float = EPS) -> np.ndarray:
    """Clip probabilities into ``[eps, 1 - eps]`` so log loss stays finite."""
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def _pairs(predictions, actuals) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("predictions must lie in [0, 1]")
    if np.any((a != 0) & (a != 1)):
        raise ValueError("actual values must be 0 or 1")
    return p, a


def mse(predictions, actuals) -> float:
    p, a = _pairs(predictions, actuals)
    return float(np.mean((p - a) ** 2))


def log_loss(predictions, actuals) -> float:
    """Mean negative log-likelihood in bits.

    A prediction of exactly 0 or 1 for the wrong outcome has no finite loss
    and raises; callers are expected to :func:`clip` first.
    """
    p, a = _pairs(predictions, actuals)
    if np.any(((p == 0) & (a == 1)) | ((p == 1) & (a == 0))):
        raise ValueError("log loss undefined: certain prediction contradicted by outcome")
    with np.errstate(divide="ignore"):
        ll = np.where(a == 1, np.log2(p), np.log2(1 - p))
    return float(-np.mean(ll))


def evaluate(predictions, actuals, eps: float = EPS) -> dict[str, float]:
    """Both metrics on clipped predictions."""
    p = clip(predictions, eps)
    return {"mse": mse(p, actuals), "log_loss": log_loss(p, actuals)}
