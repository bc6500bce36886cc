"""Constant baselines and the two count-based aggregators.

Both trained models see a user only through ``(npr, nnr)``, the numbers of
positive and negative ratings:

* count-sigmoid:  ``sigmoid(w0 + w1*npr + w2*nnr)``
* noisy-OR:       ``1 - (1-w0) * (1-w1)**npr * (1-w2)**nnr``

Training runs on counts divided by the mean training degree so that one
learning rate suits all three weights; the stored models use raw counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .dataset import FEMALE, RatingGraph
from .errors import TrainingError
from .metrics import EPS, clip
from .optim import Objective, SgdConfig, fit_with_stopping

LN2 = math.log(2.0)


class CountFeatures(NamedTuple):
    npr: int
    nnr: int


class ConstantPredictor:
    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability out of range: {p}")
        self.p = float(p)

    def predict(self, graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
        return np.full(len(users), self.p)

    def __repr__(self):
        return f"ConstantPredictor({self.p:.6g})"


def predict_constant(p: float) -> ConstantPredictor:
    return ConstantPredictor(p)


def training_average(labels: Mapping[str, int]) -> ConstantPredictor:
    """Predict the fraction of female training users for everybody."""
    if not labels:
        raise ValueError("no training labels")
    return ConstantPredictor(sum(v == FEMALE for v in labels.values()) / len(labels))


def count_features(graph: RatingGraph, user: str) -> CountFeatures:
    s = graph.user_edge_slice(user)
    npr = int(graph.edge_positive[s].sum())
    return CountFeatures(npr, (s.stop - s.start) - npr)


def count_matrix(graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
    """``(len(users), 2)`` array of ``(npr, nnr)``; unknown users count as zero."""
    deg = graph.degrees()
    pos = np.bincount(graph.edge_user[graph.edge_positive], minlength=graph.n_users)
    out = np.zeros((len(users), 2), dtype=float)
    for row, u in enumerate(users):
        idx = graph.user_index.get(u)
        if idx is not None:
            out[row] = pos[idx], deg[idx] - pos[idx]
    return out


def _count_scale(graph: RatingGraph, users: Sequence[str]) -> float:
    c = count_matrix(graph, users)
    return max(1.0, float(c.sum(axis=1).mean())) if len(c) else 1.0


def _labels_array(labels: Mapping[str, int], users: Sequence[str]) -> np.ndarray:
    return np.array([labels[u] for u in users], dtype=float)


# -- count-sigmoid -----------------------------------------------------------

@dataclass(frozen=True)
class CountSigmoidModel:
    w0: float
    w1: float
    w2: float

    def predict(self, graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
        x = count_matrix(graph, users)
        return clip(expit(self.w0 + self.w1 * x[:, 0] + self.w2 * x[:, 1]))


def predict_count_sigmoid(model: CountSigmoidModel, features: CountFeatures) -> float:
    return float(clip(expit(model.w0 + model.w1 * features.npr + model.w2 * features.nnr)))


def count_sigmoid_objective(counts: np.ndarray, y: np.ndarray, scale: float = 1.0,
                            l2: float = 0.0) -> Objective:
    """Mean base-2 log loss of ``sigmoid(t0 + (t1*npr + t2*nnr)/scale)``."""
    X = np.column_stack([np.ones(len(counts)), counts / scale])
    y = np.asarray(y, dtype=float)

    def f(theta, batch=None):
        Xb, yb = (X, y) if batch is None else (X[batch], y[batch])
        z = Xb @ theta
        # -log2 sigmoid(+-z)
        loss = np.mean(np.logaddexp(0.0, np.where(yb == 1, -z, z))) / LN2
        grad = Xb.T @ (expit(z) - yb) / (len(yb) * LN2)
        if l2:
            loss += 0.5 * l2 * theta[1:] @ theta[1:]
            grad[1:] += l2 * theta[1:]
        return float(loss), grad

    return Objective(3, len(y), f, "count-sigmoid log loss (bits)")


def train_count_sigmoid(
    graph: RatingGraph,
    labels: Mapping[str, int],
    config: SgdConfig = SgdConfig(),
    stop_labels: Mapping[str, int] | None = None,
) -> CountSigmoidModel:
    """Fit the count-sigmoid weights by SGD on base-2 log loss."""
    if not labels:
        raise ValueError("no training labels")
    users = list(labels)
    all_labels = {**labels, **(stop_labels or {})}
    scale = _count_scale(graph, users)

    def make_objective(us):
        return count_sigmoid_objective(count_matrix(graph, us), _labels_array(all_labels, us),
                                       scale, config.l2_penalty)

    def make_validation(us):
        obj = count_sigmoid_objective(count_matrix(graph, us), _labels_array(all_labels, us), scale)
        return lambda theta: obj(theta)[0]

    base = float(np.clip(np.mean(_labels_array(labels, users)), EPS, 1 - EPS))
    init = np.array([math.log(base / (1 - base)), 0.0, 0.0])
    theta = fit_with_stopping(make_objective, make_validation, users, init, config,
                              stop_users=list(stop_labels) if stop_labels else None)
    return CountSigmoidModel(float(theta[0]), float(theta[1] / scale), float(theta[2] / scale))


# -- noisy-OR ----------------------------------------------------------------

@dataclass(frozen=True)
class NoisyOrModel:
    """Noisy-OR parameters; deliberately not restricted to [0, 1]."""

    w0: float
    w1: float
    w2: float

    def predict(self, graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
        x = count_matrix(graph, users)
        return np.array([_noisy_or(self, npr, nnr) for npr, nnr in x])


def _noisy_or(model: NoisyOrModel, npr: float, nnr: float) -> float:
    log_q = 0.0
    for base, exponent in ((1.0 - model.w1, npr), (1.0 - model.w2, nnr)):
        if exponent == 0:
            continue
        if base <= 0:
            raise ValueError(f"noisy-OR base {base} must be positive for a nonzero count")
        log_q += exponent * math.log(base)
    # (1 - w0) may be any sign; the remaining product is positive
    q = (1.0 - model.w0) * math.exp(min(log_q, 700.0))
    return float(clip(1.0 - q))


def predict_noisy_or(model: NoisyOrModel, features: CountFeatures) -> float:
    return _noisy_or(model, features.npr, features.nnr)


def noisy_or_objective(counts: np.ndarray, y: np.ndarray, scale: float = 1.0,
                       eps: float = EPS) -> Objective:
    """Mean base-2 log loss of noisy-OR in log-failure coordinates.

    ``theta = (log(1-w0), scale*log(1-w1), scale*log(1-w2))`` so that
    ``log q = t0 + (t1*npr + t2*nnr)/scale`` and ``P(female) = 1 - q``.
    Every ``w < 1`` is reachable, negative ones included.  The probability is
    clipped into ``[eps, 1-eps]``; the gradient is that of the clipped loss.
    """
    X = np.column_stack([np.ones(len(counts)), counts / scale])
    y = np.asarray(y, dtype=float)
    lo, hi = math.log(eps), math.log1p(-eps)

    def f(theta, batch=None):
        Xb, yb = (X, y) if batch is None else (X[batch], y[batch])
        z = Xb @ theta
        zc = np.clip(z, lo, hi)
        inside = (z > lo) & (z < hi)
        # y=1: -log2(1 - e^z);  y=0: -z/ln2
        pos_loss = -np.log1p(-np.exp(zc)) / LN2
        neg_loss = -zc / LN2
        loss = np.mean(np.where(yb == 1, pos_loss, neg_loss))
        dz = np.where(yb == 1, np.exp(zc) / (-np.expm1(zc)), -1.0) / LN2
        dz = np.where(inside, dz, 0.0)
        grad = Xb.T @ dz / len(yb)
        return float(loss), grad

    return Objective(3, len(y), f, "noisy-OR log loss (bits)")


def train_noisy_or(
    graph: RatingGraph,
    labels: Mapping[str, int],
    config: SgdConfig = SgdConfig(),
    stop_labels: Mapping[str, int] | None = None,
) -> NoisyOrModel:
    if not labels:
        raise ValueError("no training labels")
    users = list(labels)
    all_labels = {**labels, **(stop_labels or {})}
    scale = _count_scale(graph, users)

    def make_objective(us):
        return noisy_or_objective(count_matrix(graph, us), _labels_array(all_labels, us), scale)

    def make_validation(us):
        obj = make_objective(us)
        return lambda theta: obj(theta)[0]

    base = float(np.clip(np.mean(_labels_array(labels, users)), EPS, 1 - EPS))
    init = np.array([math.log1p(-base), 0.0, 0.0])
    theta = fit_with_stopping(make_objective, make_validation, users, init, config,
                              stop_users=list(stop_labels) if stop_labels else None)
    if not np.all(np.isfinite(theta)):
        raise TrainingError("noisy-OR training produced non-finite parameters")
    return NoisyOrModel(
        float(-math.expm1(theta[0])),
        float(-math.expm1(theta[1] / scale)),
        float(-math.expm1(theta[2] / scale)),
    )
