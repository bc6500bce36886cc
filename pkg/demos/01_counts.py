# Baselines and the two count models on the 60k-rating MovieLens split.
# Run from the repo root:  python demos/01_counts.py
# Data directory comes from RELAGG_ML100K (default /root/data/ml-100k).
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from relagg.count import CountFeatures, count_matrix, predict_count_sigmoid, train_count_sigmoid, train_noisy_or, training_average
from relagg.dataset import load_ratings, load_user_labels, temporal_split
from relagg.metrics import evaluate

data = Path(os.environ.get("RELAGG_ML100K", "/root/data/ml-100k"))

# %% the split: ratings up to one timestamp are evidence, users seen before an
# earlier timestamp are labelled
split = temporal_split(load_ratings(data / "u.data"), load_user_labels(data / "u.user"),
                       884673930, 880845177)
g = split.train_graph
print(f"{len(split.train_labels)} train users, {len(split.test_users)} test users, "
      f"{g.n_items} movies, {g.n_edges} ratings")

# %% how much do the counts vary?  degree spans two orders of magnitude
counts = count_matrix(g, list(split.train_labels))
deg = counts.sum(axis=1)
print("degree quartiles:", np.percentile(deg, [0, 25, 50, 75, 100]))
print("share of positive ratings:", counts[:, 0].sum() / deg.sum())

# %% baselines
truth = split.test_labels.reveal("metrics")
y = [truth[u] for u in split.test_users]
avg = training_average(split.train_labels)
print("training average", avg.p, evaluate(avg.predict(g, split.test_users), y))

# %% count-sigmoid: the weights per rating are tiny, so heavy raters get pushed
# far from the base rate
cs = train_count_sigmoid(g, split.train_labels)
print(cs, evaluate(cs.predict(g, split.test_users), y))
for n in (10, 100, 500):
    print(f"  {n} negative ratings, no positive ones ->",
          predict_count_sigmoid(cs, CountFeatures(0, n)))

# %% noisy-OR: a negative w2 means each negative rating makes "female" less likely
no = train_noisy_or(g, split.train_labels)
print(no, evaluate(no.predict(g, split.test_users), y))
