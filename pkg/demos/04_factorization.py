# Logistic matrix factorisation of like/dislike, then gender from the user factors.
# Run from the repo root:  python demos/04_factorization.py   (about a minute)
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from relagg.dataset import load_ratings, load_user_labels, temporal_split
from relagg.factorization import MF_SGD, edge_log_loss, refit_user_factors, train_logistic_mf, train_stacked_gender
from relagg.metrics import evaluate
from relagg.optim import SgdConfig

data = Path(os.environ.get("RELAGG_ML100K", "/root/data/ml-100k"))
split = temporal_split(load_ratings(data / "u.data"), load_user_labels(data / "u.user"),
                       884673930, 880845177)
g, labels = split.train_graph, split.train_labels
truth = split.test_labels.reveal("metrics")
y = [truth[u] for u in split.test_users]
train_users = list(labels)

# %% seeded start: factor 0 begins at +2 for female and -2 for male training users
for init in ("random", "gender-seeded"):
    mf = train_logistic_mf(g, 8, MF_SGD, init, labels)
    print(init, "edge LL", round(edge_log_loss(mf, g), 4))
    # factor 0 of training users: how much of the seed survives training?
    P0 = mf.P[g.user_indices(train_users), 0]
    female = np.array([labels[u] for u in train_users]) == 1
    print("  factor 0 mean, female vs male:", P0[female].mean().round(3), P0[~female].mean().round(3))

    # test users never had a seed, so their factors sit on a different scale;
    # refitting every user's factors with the items fixed removes that gap
    for refit in (False, True):
        m = refit_user_factors(mf, g, MF_SGD.l2_penalty) if refit else mf
        st = train_stacked_gender(m, labels, SgdConfig(l2_penalty=0.1))
        print(f"  refit={refit!s:5}", evaluate(st.predict(m, split.test_users), y))
