# Each movie as a small dataset about who watches it: P1, P2 and
# limited-neighbour naive Bayes.
# Run from the repo root:  python demos/02_movies_as_datasets.py
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from relagg.dataset import load_ratings, load_user_labels, temporal_split
from relagg.metrics import evaluate
from relagg.neighborhood import LimitedNaiveBayes, MoviesAsDataset, build_item_stats, train_naive_bayes
from relagg.optim import cross_validate, kfold_plan

data = Path(os.environ.get("RELAGG_ML100K", "/root/data/ml-100k"))
split = temporal_split(load_ratings(data / "u.data"), load_user_labels(data / "u.user"),
                       884673930, 880845177)
g, labels = split.train_graph, split.train_labels
truth = split.test_labels.reveal("metrics")
y = [truth[u] for u in split.test_users]

# %% item statistics count labelled raters only
stats = build_item_stats(g, labels)
rated = stats.n_total > 0
print("movies with labelled raters:", int(rated.sum()),
      " of which no female rater:", int((rated & (stats.n_female == 0)).sum()))

# %% sweep the pseudo-count.  The CV curve uses training users only (with
# leave-one-out); the test curve is shown for comparison, not for choosing c.
grid = [0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]
plan = kfold_plan(labels, 5, seed=0)
for pooled, name in ((True, "P1"), (False, "P2")):
    def train_fn(hp, fold_labels):
        m = MoviesAsDataset(build_item_stats(g, fold_labels), hp["c"], pooled=pooled)
        return lambda users: m.predict(g, users)

    cv = cross_validate(train_fn, [{"c": c} for c in grid], plan, labels)
    test = [evaluate(MoviesAsDataset(stats, c, pooled=pooled).predict(g, split.test_users), y)["log_loss"]
            for c in grid]
    print(name)
    for c, a, b in zip(grid, cv, test):
        print(f"  c={c:<6g} cv LL {a:.4f}   test LL {b:.4f}")

# %% the female share differs between the two user groups, which is what
# separates the two curves above for P1
print("female share: train", np.mean(list(labels.values())), " test", np.mean(y))

# %% naive Bayes over all ratings is overconfident; limiting each user to k
# random ratings and averaging tames it
nb = train_naive_bayes(g, labels)
print("full naive Bayes", evaluate(nb.predict(g, split.test_users), y))
for k in (5, 10, 20, 40):
    m = LimitedNaiveBayes(nb, k, n_samples=30, seed=0)
    print(f"k={k:<3d}", evaluate(m.predict(g, split.test_users), y))
