"""Logistic matrix factorisation of the binary rating matrix, and a stacked
logistic regression that predicts gender from a user's learned bias and
latent vector.

Every user in the graph gets factors, test users included: their ratings are
evidence, only their labels are withheld.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import FEMALE, RatingGraph
from .errors import TrainingError
from .metrics import EPS, clip
from .optim import Objective, SgdConfig, fit_with_stopping

LN2 = math.log(2.0)

# Per-edge steps of about learning_rate / batch_size.
MF_SGD = SgdConfig(learning_rate=2.0, batch_size=256, epochs=150, l2_penalty=0.05, patience=10)


@dataclass(frozen=True)
class MfModel:
    mu: float
    b_user: np.ndarray
    b_item: np.ndarray
    P: np.ndarray  # (n_users, F)
    Q: np.ndarray  # (n_items, F)
    users: tuple[str, ...]
    items: tuple[str, ...]

    @property
    def n_factors(self) -> int:
        return self.P.shape[1]

    def __post_init__(self):
        object.__setattr__(self, "_user_index", {u: j for j, u in enumerate(self.users)})
        object.__setattr__(self, "_item_index", {it: j for j, it in enumerate(self.items)})

    def user_features(self, user: str) -> np.ndarray:
        """``[b_u, P_u...]``; raises KeyError for users the model never saw."""
        j = self._user_index[user]
        return np.concatenate([[self.b_user[j]], self.P[j]])

    def predict_edge(self, user: str, item: str) -> float:
        """Probability that ``user`` rates ``item`` 4 or higher.

        Unknown users or items drop out of the sum (their bias and factors count as 0).
        """
        score = self.mu
        ju = self._user_index.get(user)
        ji = self._item_index.get(item)
        if ju is not None:
            score += self.b_user[ju]
        if ji is not None:
            score += self.b_item[ji]
        if ju is not None and ji is not None:
            score += self.P[ju] @ self.Q[ji]
        return float(expit(score))


def predict_edge(model: MfModel, user: str, item: str) -> float:
    return model.predict_edge(user, item)


class _Layout:
    """Offsets of each parameter block inside the flat parameter vector."""

    def __init__(self, n_users, n_items, F):
        self.n_users, self.n_items, self.F = n_users, n_items, F
        self.bu = 1
        self.bi = self.bu + n_users
        self.P = self.bi + n_items
        self.Q = self.P + n_users * F
        self.size = self.Q + n_items * F

    def unpack(self, theta):
        F = self.F
        return (
            theta[0],
            theta[self.bu:self.bi],
            theta[self.bi:self.P],
            theta[self.P:self.Q].reshape(self.n_users, F),
            theta[self.Q:].reshape(self.n_items, F),
        )


def mf_objective(graph: RatingGraph, F: int, edges: np.ndarray | None = None, l2: float = 0.0) -> Objective:
    """Mean over edges of base-2 log loss plus ``l2/2`` times the squared norm
    of the parameters that edge touches (user/item biases and factors)."""
    layout = _Layout(graph.n_users, graph.n_items, F)
    e = np.arange(graph.n_edges) if edges is None else np.asarray(edges)
    eu = graph.edge_user[e]
    ei = graph.edge_item[e]
    y = graph.edge_positive[e].astype(float)

    def f(theta, batch=None):
        mu, bu, bi, P, Q = layout.unpack(theta)
        u, i, yb = (eu, ei, y) if batch is None else (eu[batch], ei[batch], y[batch])
        n = len(yb)
        Pu, Qi = P[u], Q[i]
        z = mu + bu[u] + bi[i] + np.einsum("ij,ij->i", Pu, Qi)
        loss = np.mean(np.logaddexp(0.0, np.where(yb == 1, -z, z))) / LN2
        dz = (expit(z) - yb) / (n * LN2)
        grad = np.zeros(layout.size)
        grad[0] = dz.sum()
        gbu = np.bincount(u, dz, minlength=layout.n_users)
        gbi = np.bincount(i, dz, minlength=layout.n_items)
        gP = np.zeros_like(P)
        gQ = np.zeros_like(Q)
        np.add.at(gP, u, dz[:, None] * Qi)
        np.add.at(gQ, i, dz[:, None] * Pu)
        if l2:
            loss += 0.5 * l2 * np.mean(bu[u] ** 2 + bi[i] ** 2
                                       + np.einsum("ij,ij->i", Pu, Pu) + np.einsum("ij,ij->i", Qi, Qi))
            c = l2 / n
            gbu += c * np.bincount(u, minlength=layout.n_users) * bu
            gbi += c * np.bincount(i, minlength=layout.n_items) * bi
            np.add.at(gP, u, c * Pu)
            np.add.at(gQ, i, c * Qi)
        grad[layout.bu:layout.bi] = gbu
        grad[layout.bi:layout.P] = gbi
        grad[layout.P:layout.Q] = gP.ravel()
        grad[layout.Q:] = gQ.ravel()
        return float(loss), grad

    return Objective(layout.size, len(e), f, f"logistic MF (F={F}) log loss")


def mf_init(graph: RatingGraph, F: int, seed: int = 0, init: str = "random",
            train_labels: Mapping[str, int] | None = None) -> np.ndarray:
    """Starting point: global bias at the positive-rating log-odds, other biases 0,
    factors uniform in (-0.1, 0.1).  ``"gender-seeded"`` overwrites factor 0 of
    each *training* user with +2 (female) or -2 (male)."""
    layout = _Layout(graph.n_users, graph.n_items, F)
    rng = np.random.default_rng([seed, 3])
    theta = np.zeros(layout.size)
    rate = float(np.clip(graph.edge_positive.mean() if graph.n_edges else 0.5, EPS, 1 - EPS))
    theta[0] = math.log(rate / (1 - rate))
    theta[layout.P:] = rng.uniform(-0.1, 0.1, size=layout.size - layout.P)
    if init in ("gender-seeded", "gender_seeded"):
        if train_labels is None:
            raise ValueError("gender-seeded initialisation needs training labels")
        if F < 1:
            raise ValueError("gender-seeded initialisation needs at least one factor")
        P = theta[layout.P:layout.Q].reshape(layout.n_users, F)
        for u in train_labels:
            j = graph.user_index.get(u)
            if j is not None:
                P[j, 0] = 2.0 if train_labels[u] == FEMALE else -2.0
    elif init != "random":
        raise ValueError(f"unknown init {init!r}")
    return theta


def train_logistic_mf(graph: RatingGraph, F: int = 8, config: SgdConfig = MF_SGD, init: str = "random",
                      train_labels: Mapping[str, int] | None = None,
                      edges: Sequence[int] | None = None) -> MfModel:
    """Fit biases and ``F`` latent factors to the polarity of the observed ratings
    (all of them, or the edge positions in ``edges``)."""
    if F < 0:
        raise ValueError("F must be nonnegative")
    theta0 = mf_init(graph, F, config.seed, init, train_labels)
    edge_ids = list(range(graph.n_edges)) if edges is None else list(edges)

    def make_objective(es):
        return mf_objective(graph, F, np.asarray(es, dtype=np.int64), config.l2_penalty)

    def make_validation(es):
        obj = mf_objective(graph, F, np.asarray(es, dtype=np.int64))
        return lambda theta: obj(theta)[0]

    theta = fit_with_stopping(make_objective, make_validation, edge_ids, theta0, config)
    mu, bu, bi, P, Q = _Layout(graph.n_users, graph.n_items, F).unpack(theta)
    return MfModel(float(mu), bu.copy(), bi.copy(), P.copy(), Q.copy(), graph.users, graph.items)


def edge_log_loss(mf: MfModel, graph: RatingGraph, edges: Sequence[int] | None = None) -> float:
    """Mean base-2 log loss of ``mf`` on the given rating edges of ``graph``."""
    e = np.arange(graph.n_edges) if edges is None else np.asarray(edges, dtype=np.int64)
    p = clip([mf.predict_edge(graph.users[u], graph.items[i])
              for u, i in zip(graph.edge_user[e], graph.edge_item[e])])
    y = graph.edge_positive[e]
    return float(-np.mean(np.where(y, np.log2(p), np.log2(1 - p))))


def tune_logistic_mf(graph: RatingGraph, grid: Sequence[Mapping], config: SgdConfig = MF_SGD,
                     k: int = 5, init: str = "random",
                     train_labels: Mapping[str, int] | None = None) -> tuple[dict, list[float]]:
    """Pick ``latent_dim`` / ``mf_l2`` by k-fold CV over rating edges.

    Returns the winning grid point (first on ties) and the mean held-out edge
    log loss of every point.
    """
    if not grid:
        raise ValueError("empty grid")
    fold = np.random.default_rng([config.seed, 5]).permutation(graph.n_edges) % k
    scores = []
    for point in grid:
        F = int(point.get("latent_dim", 8))
        cfg = config.replace(l2_penalty=float(point.get("mf_l2", config.l2_penalty)))
        losses = []
        for f in range(k):
            train_e = np.flatnonzero(fold != f)
            mf = train_logistic_mf(graph, F, cfg, init, train_labels, edges=train_e)
            losses.append(edge_log_loss(mf, graph, np.flatnonzero(fold == f)))
        scores.append(float(np.mean(losses)))
    return dict(grid[int(np.argmin(scores))]), scores


def refit_user_factors(mf: MfModel, graph: RatingGraph, l2: float, max_iter: int = 50,
                       tol: float = 1e-10) -> MfModel:
    """Re-solve every user's ``(b_u, P_u)`` exactly, holding ``mu``, ``b_i`` and ``Q`` fixed.

    Per user this is a ridge logistic regression (Newton's method) and is the
    exact minimiser of the MF objective over that user's parameters.  It puts
    training and test users on the same footing: after a gender-seeded start
    the training users otherwise keep traces of their +-2 initial values.
    """
    F = mf.n_factors
    # the MF loss is in bits, Newton below works in nats; a floor keeps
    # all-positive (separable) users finite when l2 == 0
    ridge = max(l2 * LN2, 1e-6)
    item_pos = np.array([mf._item_index.get(it, -1) for it in graph.items], dtype=np.int64)
    b_user = mf.b_user.copy()
    P = mf.P.copy()
    for u in graph.users:
        j = mf._user_index.get(u)
        if j is None:
            continue
        s = graph.user_edge_slice(u)
        cols = item_pos[graph.edge_item[s]]
        keep = cols >= 0
        cols = cols[keep]
        y = graph.edge_positive[s][keep].astype(float)
        n = len(y)
        if n == 0:
            b_user[j] = 0.0
            P[j] = 0.0
            continue
        X = np.column_stack([np.ones(n), mf.Q[cols]])
        offset = mf.mu + mf.b_item[cols]
        w = np.concatenate([[b_user[j]], P[j]])
        for _ in range(max_iter):
            p = expit(offset + X @ w)
            grad = X.T @ (p - y) + n * ridge * w
            hess = (X.T * (p * (1 - p))) @ X + n * ridge * np.eye(F + 1)
            step = np.linalg.solve(hess, grad)
            w -= step
            if np.max(np.abs(step)) < tol:
                break
        b_user[j] = w[0]
        P[j] = w[1:]
    return MfModel(mf.mu, b_user, mf.b_item, P, mf.Q, mf.users, mf.items)


# -- stacked gender classifier --------------------------------------------------

@dataclass(frozen=True)
class StackedGenderModel:
    w: float
    w_bias: float
    w_f: np.ndarray

    def predict(self, mf: MfModel, users: Sequence[str]) -> np.ndarray:
        return clip([predict_gender_mf(self, mf, u) for u in users])


def _features(mf: MfModel, users: Sequence[str]) -> np.ndarray:
    rows = []
    for u in users:
        try:
            rows.append(mf.user_features(u))
        except KeyError:
            raise KeyError(f"user {u!r} has no latent features") from None
    return np.array(rows).reshape(len(users), 1 + mf.n_factors)


def stacked_objective(X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> Objective:
    """Base-2 log loss of ``sigmoid(w + X @ v)`` plus ``l2/2 * |v|^2``."""
    Xb1 = np.column_stack([np.ones(len(X)), X])
    y = np.asarray(y, dtype=float)

    def f(theta, batch=None):
        Xb, yb = (Xb1, y) if batch is None else (Xb1[batch], y[batch])
        z = Xb @ theta
        loss = np.mean(np.logaddexp(0.0, np.where(yb == 1, -z, z))) / LN2
        grad = Xb.T @ (expit(z) - yb) / (len(yb) * LN2)
        if l2:
            loss += 0.5 * l2 * theta[1:] @ theta[1:]
            grad[1:] += l2 * theta[1:]
        return float(loss), grad

    return Objective(Xb1.shape[1], len(y), f, "stacked gender log loss")


def train_stacked_gender(mf: MfModel, labels: Mapping[str, int], config: SgdConfig = SgdConfig(),
                         stop_labels: Mapping[str, int] | None = None) -> StackedGenderModel:
    """Logistic regression of gender on ``[b_u, P_u]``."""
    if not labels:
        raise ValueError("no training labels")
    missing = [u for u in labels if u not in mf._user_index]
    if missing:
        raise KeyError(f"labelled users missing from the factorisation: {missing[:10]}")
    users = list(labels)
    all_labels = {**labels, **(stop_labels or {})}

    def data(us):
        return _features(mf, us), np.array([all_labels[u] for u in us], dtype=float)

    def make_objective(us):
        return stacked_objective(*data(us), l2=config.l2_penalty)

    def make_validation(us):
        obj = stacked_objective(*data(us))
        return lambda theta: obj(theta)[0]

    base = float(np.clip(np.mean([labels[u] for u in users]), EPS, 1 - EPS))
    init = np.zeros(2 + mf.n_factors)
    init[0] = math.log(base / (1 - base))
    theta = fit_with_stopping(make_objective, make_validation, users, init, config,
                              stop_users=list(stop_labels) if stop_labels else None)
    if not np.all(np.isfinite(theta)):
        raise TrainingError("stacked model diverged")
    return StackedGenderModel(float(theta[0]), float(theta[1]), theta[2:].copy())


def predict_gender_mf(stacked: StackedGenderModel, mf: MfModel, user: str) -> float:
    x = mf.user_features(user)
    return float(clip(expit(stacked.w + stacked.w_bias * x[0] + stacked.w_f @ x[1:])))
