"""Aggregators that treat each rated item as a small dataset about its raters.

``P1`` pools the female/total rater counts over all the items a user rated;
``P2`` averages the per-item smoothed female fractions.  Naive Bayes with
limited neighbours averages the posterior over random size-``k`` subsets of a
user's ratings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import FEMALE, RatingGraph
from .metrics import clip
from .sampling import subset_rows, user_rng


@dataclass(frozen=True)
class ItemGenderStats:
    """Per-item counts of labelled raters, overall and split by polarity.

    ``n_female`` / ``n_total`` have shape ``(n_items,)``; the ``_by_polarity``
    arrays have shape ``(n_items, 2)`` with column 1 for positive ratings.
    """

    n_female: np.ndarray
    n_total: np.ndarray
    n_female_by_polarity: np.ndarray
    n_total_by_polarity: np.ndarray
    labels: Mapping[str, int]

    def item(self, graph: RatingGraph, item: str) -> tuple[int, int]:
        i = graph.item_index[item]
        return int(self.n_female[i]), int(self.n_total[i])


def build_item_stats(graph: RatingGraph, labels: Mapping[str, int]) -> ItemGenderStats:
    """Count, for every item, how many of its raters are labelled and how many are female."""
    known = np.zeros(graph.n_users, dtype=bool)
    female = np.zeros(graph.n_users, dtype=bool)
    for u, y in labels.items():
        idx = graph.user_index.get(u)
        if idx is not None:
            known[idx] = True
            female[idx] = y == FEMALE
    e_known = known[graph.edge_user]
    e_female = female[graph.edge_user] & e_known
    pol = graph.edge_positive.astype(np.int64)
    shape = (graph.n_items, 2)
    total_p = np.zeros(shape)
    female_p = np.zeros(shape)
    np.add.at(total_p, (graph.edge_item, pol), e_known)
    np.add.at(female_p, (graph.edge_item, pol), e_female)
    return ItemGenderStats(
        n_female=female_p.sum(axis=1),
        n_total=total_p.sum(axis=1),
        n_female_by_polarity=female_p,
        n_total_by_polarity=total_p,
        labels=dict(labels),
    )


def _edge_counts(stats: ItemGenderStats, graph: RatingGraph, user: str,
                 leave_one_out: bool, polarity_aware: bool) -> tuple[np.ndarray, np.ndarray]:
    s = graph.user_edge_slice(user)
    items = graph.edge_item[s]
    if polarity_aware:
        pol = graph.edge_positive[s].astype(np.int64)
        nf = stats.n_female_by_polarity[items, pol]
        nt = stats.n_total_by_polarity[items, pol]
    else:
        nf = stats.n_female[items]
        nt = stats.n_total[items]
    if leave_one_out and user in stats.labels:
        # the user is one of the counted raters of every item they rated
        nf = nf - (stats.labels[user] == FEMALE)
        nt = nt - 1
    return nf, nt


def predict_p1(stats: ItemGenderStats, graph: RatingGraph, user: str, c: float,
               leave_one_out: bool = True, polarity_aware: bool = False) -> float:
    """Pooled estimate ``(c + sum n_female) / (2c + sum n_total)`` over the user's items."""
    if c <= 0:
        raise ValueError("pseudo-count must be positive")
    nf, nt = _edge_counts(stats, graph, user, leave_one_out, polarity_aware)
    return float((c + nf.sum()) / (2 * c + nt.sum()))


def predict_p2(stats: ItemGenderStats, graph: RatingGraph, user: str, c: float,
               leave_one_out: bool = True, polarity_aware: bool = False) -> float:
    """Mean over the user's items of ``(c + n_female) / (2c + n_total)``; 0.5 for no items."""
    if c <= 0:
        raise ValueError("pseudo-count must be positive")
    nf, nt = _edge_counts(stats, graph, user, leave_one_out, polarity_aware)
    if len(nf) == 0:
        return 0.5
    return float(np.mean((c + nf) / (2 * c + nt)))


@dataclass(frozen=True)
class MoviesAsDataset:
    """P1 (``pooled=True``) or P2 estimator with its pseudo-count."""

    stats: ItemGenderStats
    c: float
    pooled: bool = True
    leave_one_out: bool = True
    polarity_aware: bool = False

    def predict(self, graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
        fn = predict_p1 if self.pooled else predict_p2
        return np.array([fn(self.stats, graph, u, self.c, self.leave_one_out, self.polarity_aware)
                         for u in users])


# -- naive Bayes ---------------------------------------------------------------

@dataclass(frozen=True)
class NaiveBayesModel:
    """Gender prior and per-(item, polarity) categorical likelihoods.

    Event ``2*item + positive`` is "the user gave ``item`` a rating of that
    polarity".  Only events among items rated by some labelled user form the
    event space; ratings outside it contribute no factor.
    """

    prior: float
    likelihood: np.ndarray  # (2, n_events): row 0 male, row 1 female
    in_space: np.ndarray  # (n_events,) bool

    @property
    def log_ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.log(self.likelihood[FEMALE]) - np.log(self.likelihood[1 - FEMALE])
        return np.where(self.in_space, r, 0.0)

    def edge_log_ratios(self, graph: RatingGraph, user: str) -> np.ndarray:
        s = graph.user_edge_slice(user)
        events = 2 * graph.edge_item[s] + graph.edge_positive[s]
        return self.log_ratio[events]

    def posterior(self, log_ratios: np.ndarray) -> float:
        return float(expit(math.log(self.prior / (1 - self.prior)) + log_ratios.sum()))

    def predict(self, graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
        return clip([self.posterior(self.edge_log_ratios(graph, u)) for u in users])


def train_naive_bayes(graph: RatingGraph, labels: Mapping[str, int], smoothing: float = 1.0) -> NaiveBayesModel:
    """Laplace-smoothed naive Bayes over observed ratings only."""
    if not labels:
        raise ValueError("no training labels")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    y_user = np.full(graph.n_users, -1)
    for u, y in labels.items():
        idx = graph.user_index.get(u)
        if idx is not None:
            y_user[idx] = y
    y_edge = y_user[graph.edge_user]
    labelled = y_edge >= 0
    events = 2 * graph.edge_item + graph.edge_positive
    n_events = 2 * graph.n_items
    counts = np.zeros((2, n_events))
    np.add.at(counts, (y_edge[labelled], events[labelled]), 1.0)

    rated_items = np.zeros(graph.n_items, dtype=bool)
    rated_items[graph.edge_item[labelled]] = True
    in_space = np.repeat(rated_items, 2)
    size = int(in_space.sum())
    lik = np.where(in_space, counts + smoothing, 0.0)
    lik = lik / (counts.sum(axis=1, keepdims=True) + smoothing * size)

    n_f = sum(v == FEMALE for v in labels.values())
    prior = (n_f + smoothing) / (len(labels) + 2 * smoothing)
    return NaiveBayesModel(prior=prior, likelihood=lik, in_space=in_space)


def predict_nb_limited(model: NaiveBayesModel, graph: RatingGraph, user: str, k: int,
                       n_samples: int = 30, seed: int = 0) -> float:
    """Average naive Bayes posterior over ``n_samples`` random size-``k`` rating subsets."""
    if k < 1 or n_samples < 1:
        raise ValueError("k and n_samples must be positive")
    r = model.edge_log_ratios(graph, user)
    if k >= len(r):
        return model.posterior(r)
    rows = subset_rows(user_rng(seed, user), len(r), k, n_samples)
    logit_prior = math.log(model.prior / (1 - model.prior))
    return float(np.mean(expit(logit_prior + r[rows].sum(axis=1))))


@dataclass(frozen=True)
class LimitedNaiveBayes:
    model: NaiveBayesModel
    k: int
    n_samples: int = 30
    seed: int = 0

    def predict(self, graph: RatingGraph, users: Sequence[str]) -> np.ndarray:
        return clip([predict_nb_limited(self.model, graph, u, self.k, self.n_samples, self.seed)
                     for u in users])
