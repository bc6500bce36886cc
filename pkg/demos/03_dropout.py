# Per-movie relational logistic regression, with and without relational dropout.
# Run from the repo root:  python demos/03_dropout.py   (about a minute)
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from relagg.dataset import load_ratings, load_user_labels, temporal_split
from relagg.metrics import evaluate
from relagg.optim import SgdConfig
from relagg.rlr import DropoutConfig, train_rlr, train_rlr_dropout

data = Path(os.environ.get("RELAGG_ML100K", "/root/data/ml-100k"))
split = temporal_split(load_ratings(data / "u.data"), load_user_labels(data / "u.user"),
                       884673930, 880845177)
g, labels = split.train_graph, split.train_labels
truth = split.test_labels.reveal("metrics")
y = np.array([truth[u] for u in split.test_users])
deg = g.degrees()[g.user_indices(split.test_users)]

# %% plain RLR trained to convergence: one weight per (movie, polarity) and
# users with hundreds of ratings
plain = train_rlr(g, labels, SgdConfig(patience=None))
p_plain = plain.predict(g, split.test_users)
print("plain", evaluate(p_plain, y))

# %% dropout: every epoch sees 20 random ratings per user; predictions average
# the sigmoid over 30 random subsets
drop_cfg = DropoutConfig(k_train=20, k_test=20, n_test_samples=30)
drop = train_rlr_dropout(g, labels, SgdConfig(l2_penalty=1e-4), drop_cfg)
p_drop = drop.predict(g, split.test_users, drop_cfg)
print("dropout", evaluate(p_drop, y))

# %% where does plain RLR lose?  confident mistakes by heavy raters
wrong = np.abs(p_plain - y) > 0.9
print("plain: confident mistakes", int(wrong.sum()), " median degree", np.median(deg[wrong]) if wrong.any() else 0)
print("dropout: confident mistakes", int((np.abs(p_drop - y) > 0.9).sum()))
for lo, hi in ((1, 50), (50, 200), (200, 10**6)):
    sel = (deg >= lo) & (deg < hi)
    if sel.any():
        print(f"degree [{lo},{hi}): n={sel.sum():3d}  plain LL {evaluate(p_plain[sel], y[sel])['log_loss']:.3f}"
              f"  dropout LL {evaluate(p_drop[sel], y[sel])['log_loss']:.3f}")
