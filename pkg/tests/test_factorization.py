from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from relagg.dataset import FEMALE, MALE
from relagg.factorization import (
    MF_SGD, MfModel, StackedGenderModel, _Layout, edge_log_loss, mf_init, mf_objective,
    predict_edge, predict_gender_mf, refit_user_factors, stacked_objective, train_logistic_mf,
    train_stacked_gender, tune_logistic_mf,
)
from relagg.optim import SgdConfig, grad_check

from conftest import make_graph


def mf(mu=0.0, bu=(0.0,), bi=(0.0,), P=((0.0,),), Q=((0.0,),), users=("u",), items=("i",)):
    return MfModel(mu, np.array(bu, float), np.array(bi, float), np.array(P, float).reshape(len(users), -1),
                   np.array(Q, float).reshape(len(items), -1), tuple(users), tuple(items))


def test_predict_edge_hand_values():
    assert predict_edge(mf(), "u", "i") == 0.5
    assert predict_edge(mf(mu=1.0), "u", "i") == pytest.approx(0.7311, abs=1e-4)
    assert predict_edge(mf(P=[[1, 1]], Q=[[1, 1]]), "u", "i") == pytest.approx(0.8808, abs=1e-4)
    # unknown ids keep only the terms that exist
    m = mf(mu=0.5, bu=[1.0], bi=[-2.0], P=[[1.0]], Q=[[1.0]])
    assert predict_edge(m, "u", "other") == pytest.approx(expit(1.5))
    assert predict_edge(m, "nobody", "i") == pytest.approx(expit(-1.5))


def test_stacked_hand_values():
    m = mf(bu=[0.5], P=[[0.3, -0.2]])
    assert predict_gender_mf(StackedGenderModel(0.0, 0.0, np.zeros(2)), m, "u") == 0.5
    assert predict_gender_mf(StackedGenderModel(0.0, 1.0, np.zeros(2)), m, "u") == pytest.approx(0.6225, abs=1e-4)
    with pytest.raises(KeyError):
        predict_gender_mf(StackedGenderModel(0.0, 1.0, np.zeros(2)), m, "nobody")


@pytest.fixture
def dense():
    # 4x4 all-observed matrix; users 0,1 like items 0,1 and users 2,3 like 2,3, with two exceptions
    like = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 1], [0, 1, 1, 1]], bool)
    edges = [(f"u{a}", f"i{b}", bool(like[a, b])) for a in range(4) for b in range(4)]
    return make_graph(edges), {"u0": FEMALE, "u1": FEMALE, "u2": MALE}


def _loss(theta, layout, eu, ei, y, l2):
    """Per-edge regularised MF loss in bits, written out independently of the library."""
    mu, bu, bi, P, Q = layout.unpack(theta)
    z = mu + bu[eu] + bi[ei] + np.sum(P[eu] * Q[ei], axis=1)
    ll = -(y * np.log2(expit(z)) + (1 - y) * np.log2(expit(-z)))
    reg = bu[eu] ** 2 + bi[ei] ** 2 + np.sum(P[eu] ** 2, 1) + np.sum(Q[ei] ** 2, 1)
    return float(np.mean(ll + 0.5 * l2 * reg))


def _alternating_oracle(g, F, l2, starts=4, rounds=60):
    layout = _Layout(g.n_users, g.n_items, F)
    eu, ei, y = g.edge_user, g.edge_item, g.edge_positive.astype(float)
    blocks = [np.r_[0:1]]
    blocks += [np.r_[layout.bu + u:layout.bu + u + 1, layout.P + u * F:layout.P + (u + 1) * F] for u in range(g.n_users)]
    blocks += [np.r_[layout.bi + i:layout.bi + i + 1, layout.Q + i * F:layout.Q + (i + 1) * F] for i in range(g.n_items)]
    best = np.inf
    for s in range(starts):
        theta = np.random.default_rng(100 + s).normal(scale=0.5, size=layout.size)
        for _ in range(rounds):
            for idx in blocks:
                def f(v, idx=idx):
                    t = theta.copy()
                    t[idx] = v
                    return _loss(t, layout, eu, ei, y, l2)
                theta[idx] = minimize(f, theta[idx], method="BFGS").x
        best = min(best, _loss(theta, layout, eu, ei, y, l2))
    return best


def _theta(m, g):
    layout = _Layout(g.n_users, g.n_items, m.n_factors)
    assert m.users == g.users and m.items == g.items
    return np.concatenate([[m.mu], m.b_user, m.b_item, m.P.ravel(), m.Q.ravel()]), layout


def test_mf_matches_alternating_oracle(dense):
    g, _ = dense
    l2 = 0.05
    m = train_logistic_mf(g, 2, SgdConfig(learning_rate=1.0, epochs=4000, batch_size=16, l2_penalty=l2,
                                          patience=None))
    theta, layout = _theta(m, g)
    trained = _loss(theta, layout, g.edge_user, g.edge_item, g.edge_positive.astype(float), l2)
    assert trained == pytest.approx(mf_objective(g, 2, l2=l2)(theta)[0])
    assert abs(trained - _alternating_oracle(g, 2, l2)) < 1e-2


def test_f0_is_bias_only(dense):
    g, _ = dense
    m = train_logistic_mf(g, 0, MF_SGD.replace(patience=None, epochs=50))
    assert m.n_factors == 0
    for u in g.users:
        for it in g.items:
            j, k = g.user_index[u], g.item_index[it]
            assert predict_edge(m, u, it) == pytest.approx(expit(m.mu + m.b_user[j] + m.b_item[k]))


def test_gender_seeded_init(dense):
    g, labels = dense
    layout = _Layout(g.n_users, g.n_items, 3)
    theta = mf_init(g, 3, seed=0, init="gender-seeded", train_labels=labels)
    P = theta[layout.P:layout.Q].reshape(g.n_users, 3)
    Q = theta[layout.Q:]
    for u, y in labels.items():
        assert P[g.user_index[u], 0] == (2.0 if y == FEMALE else -2.0)
    rest = np.concatenate([P[g.user_index["u3"]], P[:, 1:].ravel(), Q])
    assert np.all(np.abs(rest) < 0.1)
    assert np.all(theta[layout.bu:layout.P] == 0)
    with pytest.raises(ValueError):
        mf_init(g, 3, init="gender-seeded")
    with pytest.raises(ValueError):
        mf_init(g, 3, init="zeros")


class _Recorder(dict):
    def __init__(self, *a):
        super().__init__(*a)
        self.read = set()

    def __getitem__(self, key):
        self.read.add(key)
        return super().__getitem__(key)

    def get(self, key, default=None):
        self.read.add(key)
        return super().get(key, default)


def test_seeded_init_reads_training_labels_only(dense):
    g, labels = dense
    rec = _Recorder(labels)
    train_logistic_mf(g, 2, MF_SGD.replace(epochs=3), init="gender-seeded", train_labels=rec)
    assert rec.read <= set(labels) and "u3" not in rec.read


def test_sign_symmetry(dense):
    g, _ = dense
    m = train_logistic_mf(g, 3, MF_SGD.replace(epochs=60, patience=None))
    for f in range(3):
        flip = np.ones(3)
        flip[f] = -1
        m2 = MfModel(m.mu, m.b_user, m.b_item, m.P * flip, m.Q * flip, m.users, m.items)
        for u in g.users:
            for it in g.items:
                assert predict_edge(m2, u, it) == pytest.approx(predict_edge(m, u, it), abs=1e-12)


def test_grad_checks(dense):
    g, _ = dense
    rng = np.random.default_rng(0)
    for F, l2, edges in ((2, 0.0, None), (3, 0.2, np.arange(0, 16, 2)), (0, 0.1, None)):
        obj = mf_objective(g, F, edges, l2)
        for _ in range(10):
            assert grad_check(obj, rng.normal(size=obj.dimension)) < 1e-4
    X = rng.normal(size=(20, 4))
    y = rng.integers(0, 2, 20)
    for l2 in (0.0, 0.3):
        obj = stacked_objective(X, y, l2)
        for _ in range(10):
            assert grad_check(obj, rng.normal(size=5)) < 1e-4


def test_training_never_worse_than_init(dense):
    g, _ = dense
    cfg = MF_SGD.replace(epochs=20, patience=None, learning_rate=50.0)
    obj = mf_objective(g, 2, l2=cfg.l2_penalty)
    m = train_logistic_mf(g, 2, cfg)
    assert obj(_theta(m, g)[0])[0] <= obj(mf_init(g, 2, cfg.seed))[0]


def test_refit_user_factors_is_stationary(dense):
    g, _ = dense
    l2 = 0.1
    m = refit_user_factors(train_logistic_mf(g, 2, MF_SGD.replace(epochs=30, l2_penalty=l2)), g, l2)
    theta, layout = _theta(m, g)
    _, grad = mf_objective(g, 2, l2=l2)(theta)
    user_block = np.r_[grad[layout.bu:layout.bi], grad[layout.P:layout.Q]]
    assert np.max(np.abs(user_block)) < 1e-8


def test_edge_cv(dense):
    g, _ = dense
    cfg = MF_SGD.replace(epochs=5)
    best, scores = tune_logistic_mf(g, [{"latent_dim": 1, "mf_l2": 0.1}, {"latent_dim": 2, "mf_l2": 0.01}], cfg, k=2)
    assert len(scores) == 2 and best in ({"latent_dim": 1, "mf_l2": 0.1}, {"latent_dim": 2, "mf_l2": 0.01})
    assert best == [{"latent_dim": 1, "mf_l2": 0.1}, {"latent_dim": 2, "mf_l2": 0.01}][int(np.argmin(scores))]
    assert edge_log_loss(mf(users=g.users[:1], items=g.items[:1]), g) == pytest.approx(1.0)


def test_stacked_bias_only_is_training_average():
    users = [f"u{n}" for n in range(10)]
    m = MfModel(0.0, np.zeros(10), np.zeros(1), np.zeros((10, 0)), np.zeros((1, 0)), tuple(users), ("i",))
    labels = {u: int(n < 3) for n, u in enumerate(users)}
    st = train_stacked_gender(m, labels, SgdConfig(learning_rate=0.5, epochs=2000, patience=None))
    assert st.predict(m, users[:1])[0] == pytest.approx(0.3, abs=1e-3)


def test_stacked_separable_loss_vanishes():
    users = ["a", "b", "c", "d"]
    m = MfModel(0.0, np.array([1.0, 2.0, -1.0, -2.0]), np.zeros(1), np.zeros((4, 1)), np.zeros((1, 1)),
                tuple(users), ("i",))
    labels = {"a": 1, "b": 1, "c": 0, "d": 0}
    st = train_stacked_gender(m, labels, SgdConfig(learning_rate=1.0, epochs=3000, patience=None))
    p = st.predict(m, users)
    assert np.all(p[:2] > 0.99) and np.all(p[2:] < 0.01)


def test_stacked_missing_user():
    with pytest.raises(KeyError):
        train_stacked_gender(mf(), {"nobody": 1})
