"""Relational logistic regression with a bias and two weights per item.

The score of a user is ``w0 + sum(h_pos[i] for positive ratings) + sum(h_neg[i]
for negative ratings)`` and the prediction is its sigmoid.  With relational
dropout each training epoch sees only ``k_train`` random ratings per user, and
a test prediction averages the sigmoid over ``n_test_samples`` random size-
``k_test`` subsets.

Dropout subsets are redrawn once per epoch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .dataset import RatingGraph
from .metrics import EPS, clip
from .optim import Objective, SgdConfig, fit_with_stopping
from .sampling import subset_rows, user_rng

LN2 = math.log(2.0)


@dataclass(frozen=True)
class DropoutConfig:
    k_train: int = 10
    k_test: int = 10
    n_test_samples: int = 30
    seed: int = 0

    def __post_init__(self):
        if min(self.k_train, self.k_test, self.n_test_samples) < 1:
            raise ValueError("dropout sizes must be positive")


# Keeps every rating: plain RLR is dropout with an unbounded subset size.
NO_DROPOUT = DropoutConfig(k_train=2**62, k_test=2**62, n_test_samples=1)


@dataclass(frozen=True)
class PerItemRlrModel:
    w0: float
    h_pos: np.ndarray
    h_neg: np.ndarray
    items: tuple[str, ...]
    _item_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._item_index is None:
            object.__setattr__(self, "_item_index", {it: j for j, it in enumerate(self.items)})

    def h1(self, item: str) -> float:
        j = self._item_index.get(item)
        return 0.0 if j is None else float(self.h_pos[j])

    def h2(self, item: str) -> float:
        j = self._item_index.get(item)
        return 0.0 if j is None else float(self.h_neg[j])

    def edge_weights(self, graph: RatingGraph, user: str) -> np.ndarray:
        """Weight of each of ``user``'s ratings, in graph edge order; unseen items weigh 0."""
        s = graph.user_edge_slice(user)
        cols = np.array([self._item_index.get(graph.items[i], -1) for i in graph.edge_item[s]],
                        dtype=np.int64)
        pos = graph.edge_positive[s]
        w = np.where(pos, self.h_pos[cols], self.h_neg[cols])
        return np.where(cols >= 0, w, 0.0)

    def predict(self, graph: RatingGraph, users: Sequence[str],
                dropout: DropoutConfig = NO_DROPOUT) -> np.ndarray:
        return clip([_predict_weights(self.w0, self.edge_weights(graph, u), u, dropout) for u in users])


def rlr_score(model: PerItemRlrModel, edges: Sequence[tuple[str, bool]]) -> float:
    """``w0`` plus the item weight of each ``(item, positive)`` rating."""
    return model.w0 + sum(model.h1(i) if pos else model.h2(i) for i, pos in edges)


def _predict_weights(w0: float, weights: np.ndarray, user: str, dropout: DropoutConfig) -> float:
    if dropout.k_test >= len(weights):
        return float(expit(w0 + weights.sum()))
    rows = subset_rows(user_rng(dropout.seed, user), len(weights), dropout.k_test, dropout.n_test_samples)
    return float(np.mean(expit(w0 + weights[rows].sum(axis=1))))


def predict_rlr_dropout(model: PerItemRlrModel, graph: RatingGraph, user: str,
                        dropout: DropoutConfig) -> float:
    """Mean sigmoid over random rating subsets of size ``k_test``."""
    return float(clip(_predict_weights(model.w0, model.edge_weights(graph, user), user, dropout)))


class _UserEdges:
    """Edge columns of a fixed list of users, grouped by user."""

    def __init__(self, graph: RatingGraph, users: Sequence[str]):
        n_items = graph.n_items
        rows, cols = [], []
        for r, u in enumerate(users):
            s = graph.user_edge_slice(u)
            items = graph.edge_item[s]
            cols.append(1 + items + np.where(graph.edge_positive[s], 0, n_items))
            rows.append(np.full(len(items), r))
        self.n_users = len(users)
        self.dim = 1 + 2 * n_items
        self.row = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        self.col = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        self.degree = np.bincount(self.row, minlength=self.n_users)
        self.start = np.concatenate([[0], np.cumsum(self.degree)[:-1]])

    def matrix(self, keep: np.ndarray | None = None) -> sp.csr_matrix:
        row, col = (self.row, self.col) if keep is None else (self.row[keep], self.col[keep])
        bias_rows = np.arange(self.n_users)
        data = np.ones(len(row) + self.n_users)
        return sp.csr_matrix(
            (data, (np.concatenate([bias_rows, row]), np.concatenate([np.zeros(self.n_users, np.int64), col]))),
            shape=(self.n_users, self.dim),
        )

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray | None:
        """Edge positions keeping ``min(k, degree)`` random edges per user; None keeps all."""
        if len(self.degree) == 0 or k >= self.degree.max():
            return None
        keys = rng.random(len(self.row))
        order = np.lexsort((keys, self.row))
        rank = np.arange(len(order)) - self.start[self.row[order]]
        return np.sort(order[rank < k])


def rlr_objective(graph: RatingGraph, users: Sequence[str], y: np.ndarray, l2: float = 0.0,
                  k_train: int | None = None, seed: int = 0) -> Objective:
    """Mean base-2 log loss plus ``l2/2 * |h|^2`` over ``users``.

    With ``k_train`` each call to ``resample`` draws a fresh size-``k_train``
    rating subset per user.
    """
    edges = _UserEdges(graph, users)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng([seed, 1])
    state = {"X": edges.matrix()}

    def resample():
        if k_train is not None:
            state["X"] = edges.matrix(edges.sample(rng, k_train))

    def f(theta, batch=None):
        X = state["X"] if batch is None else state["X"][batch]
        yb = y if batch is None else y[batch]
        z = X @ theta
        loss = np.mean(np.logaddexp(0.0, np.where(yb == 1, -z, z))) / LN2
        grad = X.T @ (expit(z) - yb) / (len(yb) * LN2)
        if l2:
            h = theta[1:]
            loss += 0.5 * l2 * (h @ h)
            grad[1:] += l2 * h
        return float(loss), grad

    desc = "per-item RLR log loss" + (f" (dropout k={k_train})" if k_train else "")
    return Objective(edges.dim, len(users), f, desc, resample if k_train is not None else None)


def _dropout_validation(graph: RatingGraph, users: Sequence[str], y: np.ndarray, k: int | None,
                        n_samples: int, seed: int):
    """Held-out log loss of the test-time averaged prediction, with frozen subsets."""
    edges = _UserEdges(graph, users)
    y = np.asarray(y, dtype=float)
    if k is None or edges.sample(np.random.default_rng(0), k) is None:
        mats = [edges.matrix()]
    else:
        rng = np.random.default_rng([seed, 2])
        mats = [edges.matrix(edges.sample(rng, k)) for _ in range(n_samples)]

    def loss(theta):
        p = clip(np.mean([expit(X @ theta) for X in mats], axis=0))
        return float(-np.mean(y * np.log2(p) + (1 - y) * np.log2(1 - p)))

    return loss


def _train(graph, labels, config, k_train, k_test, n_samples, seed, stop_labels):
    if not labels:
        raise ValueError("no training labels")
    users = list(labels)
    all_labels = {**labels, **(stop_labels or {})}

    def ys(us):
        return np.array([all_labels[u] for u in us], dtype=float)

    def make_objective(us):
        return rlr_objective(graph, us, ys(us), config.l2_penalty, k_train, seed)

    def make_validation(us):
        return _dropout_validation(graph, us, ys(us), k_test, min(n_samples, 10), seed)

    base = float(np.clip(ys(users).mean(), EPS, 1 - EPS))
    init = np.zeros(1 + 2 * graph.n_items)
    init[0] = math.log(base / (1 - base))
    theta = fit_with_stopping(make_objective, make_validation, users, init, config,
                              stop_users=list(stop_labels) if stop_labels else None)
    n = graph.n_items
    return PerItemRlrModel(float(theta[0]), theta[1:1 + n].copy(), theta[1 + n:].copy(), graph.items)


def train_rlr(graph: RatingGraph, labels: Mapping[str, int], config: SgdConfig = SgdConfig(),
              stop_labels: Mapping[str, int] | None = None) -> PerItemRlrModel:
    """Per-item RLR trained on all of each user's ratings."""
    return _train(graph, labels, config, None, None, 1, config.seed, stop_labels)


def train_rlr_dropout(graph: RatingGraph, labels: Mapping[str, int], sgd: SgdConfig = SgdConfig(),
                      dropout: DropoutConfig = DropoutConfig(),
                      stop_labels: Mapping[str, int] | None = None) -> PerItemRlrModel:
    """Per-item RLR where each epoch sees ``k_train`` random ratings per user."""
    return _train(graph, labels, sgd, dropout.k_train, dropout.k_test, dropout.n_test_samples,
                  dropout.seed, stop_labels)
