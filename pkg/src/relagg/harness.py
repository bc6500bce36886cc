"""Experiment orchestration: load, split, tune by k-fold CV, fit, evaluate, report."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .count import train_count_sigmoid, train_noisy_or, training_average, predict_constant
from .dataset import LabeledSplit, RatingGraph, fraction_cutoffs, load_ratings, load_user_labels, temporal_split
from .errors import ConfigError, DataError, RelaggError, TrainingError
from .factorization import MF_SGD, refit_user_factors, train_logistic_mf, tune_logistic_mf, train_stacked_gender
from .metrics import evaluate
from .neighborhood import LimitedNaiveBayes, MoviesAsDataset, build_item_stats, train_naive_bayes
from .optim import SgdConfig, cross_validate, expand_grid, kfold_plan
from .rlr import DropoutConfig, train_rlr, train_rlr_dropout

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"

Predictor = Callable[[Sequence[str]], np.ndarray]


@dataclass
class FitContext:
    graph: RatingGraph
    labels: Mapping[str, int]
    seed: int
    # labels used only for stopping under --paper-stopping
    stop_labels: Mapping[str, int] | None = None
    cache: dict = field(default_factory=dict)


@dataclass
class Fitted:
    predict: Predictor
    details: dict = field(default_factory=dict)


_SGD_KEYS = {"learning_rate", "epochs", "batch_size", "l2", "patience"}


def _sgd(params: Mapping[str, Any], seed: int, base: SgdConfig = SgdConfig()) -> SgdConfig:
    cfg = base.replace(seed=seed)
    changes = {}
    for key in ("learning_rate", "epochs", "batch_size", "patience"):
        if key in params:
            changes[key] = params[key]
    if "l2" in params:
        changes["l2_penalty"] = float(params["l2"])
    return cfg.replace(**changes)


def _fit_constant(ctx, params):
    model = predict_constant(float(params.get("p", 0.5)))
    return Fitted(lambda users: model.predict(ctx.graph, users), {"p": model.p})


def _fit_average(ctx, params):
    model = training_average(ctx.labels)
    return Fitted(lambda users: model.predict(ctx.graph, users), {"p": model.p})


def _fit_count_sigmoid(ctx, params):
    m = train_count_sigmoid(ctx.graph, ctx.labels, _sgd(params, ctx.seed), ctx.stop_labels)
    return Fitted(lambda users: m.predict(ctx.graph, users), {"w0": m.w0, "w1": m.w1, "w2": m.w2})


def _fit_noisy_or(ctx, params):
    m = train_noisy_or(ctx.graph, ctx.labels, _sgd(params, ctx.seed), ctx.stop_labels)
    return Fitted(lambda users: m.predict(ctx.graph, users), {"w0": m.w0, "w1": m.w1, "w2": m.w2})


def _movies_as_dataset(pooled):
    def fit(ctx, params):
        model = MoviesAsDataset(
            build_item_stats(ctx.graph, ctx.labels),
            float(params.get("pseudo_count", 1.0)),
            pooled=pooled,
            leave_one_out=bool(params.get("leave_one_out", True)),
            polarity_aware=bool(params.get("polarity_aware", False)),
        )
        return Fitted(lambda users: model.predict(ctx.graph, users))
    return fit


def _fit_nb_limited(ctx, params):
    nb = train_naive_bayes(ctx.graph, ctx.labels, float(params.get("smoothing", 1.0)))
    model = LimitedNaiveBayes(nb, int(params.get("k", 10)), int(params.get("n_samples", 30)), ctx.seed)
    return Fitted(lambda users: model.predict(ctx.graph, users), {"prior": nb.prior})


def _dropout(params, seed) -> DropoutConfig:
    k_train = int(params.get("k_train", params.get("k", 10)))
    return DropoutConfig(k_train=k_train, k_test=int(params.get("k_test", k_train)),
                         n_test_samples=int(params.get("n_samples", 30)), seed=seed)


def _fit_rlr(ctx, params):
    m = train_rlr(ctx.graph, ctx.labels, _sgd(params, ctx.seed), ctx.stop_labels)
    return Fitted(lambda users: m.predict(ctx.graph, users), {"w0": m.w0})


def _fit_rlr_dropout(ctx, params):
    d = _dropout(params, ctx.seed)
    m = train_rlr_dropout(ctx.graph, ctx.labels, _sgd(params, ctx.seed), d, ctx.stop_labels)
    return Fitted(lambda users: m.predict(ctx.graph, users, d), {"w0": m.w0})


def _fit_mf_stacked(ctx, params):
    init = str(params.get("init", "gender-seeded"))
    mf_cfg = MF_SGD.replace(
        seed=ctx.seed,
        learning_rate=float(params.get("mf_learning_rate", MF_SGD.learning_rate)),
        epochs=int(params.get("mf_epochs", MF_SGD.epochs)),
        batch_size=int(params.get("mf_batch_size", MF_SGD.batch_size)),
    )
    mf_hp = {"latent_dim": int(params.get("latent_dim", 8)),
             "mf_l2": float(params.get("mf_l2", MF_SGD.l2_penalty))}
    if params.get("mf_grid"):
        # edge-level CV with random init never reads a gender label, so one
        # choice serves every fold
        tkey = ("mf-tune", json.dumps(params["mf_grid"], sort_keys=True), mf_cfg)
        if tkey not in ctx.cache:
            ctx.cache[tkey] = tune_logistic_mf(ctx.graph, expand_grid(params["mf_grid"]), mf_cfg,
                                               int(params.get("mf_cv_folds", 5)), "random")
        mf_hp.update(ctx.cache[tkey][0])
    F = int(mf_hp["latent_dim"])
    mf_cfg = mf_cfg.replace(l2_penalty=float(mf_hp["mf_l2"]))
    refit = bool(params.get("refit_users", True))
    # MF ignores labels unless seeded by them, so fold models can share it
    label_key = frozenset(ctx.labels.items()) if init != "random" else None
    key = ("mf", F, init, mf_cfg, refit, label_key)
    mf = ctx.cache.get(key)
    if mf is None:
        mf = train_logistic_mf(ctx.graph, F, mf_cfg, init, dict(ctx.labels) if init != "random" else None)
        if refit:
            mf = refit_user_factors(mf, ctx.graph, mf_cfg.l2_penalty)
        ctx.cache[key] = mf
    stacked_cfg = _sgd({k: v for k, v in params.items() if k in _SGD_KEYS}, ctx.seed)
    stacked_cfg = stacked_cfg.replace(l2_penalty=float(params.get("lr_l2", stacked_cfg.l2_penalty)))
    st = train_stacked_gender(mf, ctx.labels, stacked_cfg, ctx.stop_labels)
    return Fitted(lambda users: st.predict(mf, users),
                  {"latent_dim": F, "mf_l2": mf_cfg.l2_penalty, "w": st.w, "w_bias": st.w_bias, "w_f": [float(x) for x in st.w_f]})


METHODS: dict[str, Callable[[FitContext, dict], Fitted]] = {
    "predict-half": _fit_constant,
    "train-average": _fit_average,
    "count-sigmoid": _fit_count_sigmoid,
    "noisy-or": _fit_noisy_or,
    "p1": _movies_as_dataset(pooled=True),
    "p2": _movies_as_dataset(pooled=False),
    "nb-limited": _fit_nb_limited,
    "rlr": _fit_rlr,
    "rlr-dropout": _fit_rlr_dropout,
    "mf-stacked": _fit_mf_stacked,
}

TABLE_NAMES = {
    "predict-half": "Predict 0.5",
    "train-average": "Training average",
    "count-sigmoid": "MLN/RLR (no hidden), count-sigmoid",
    "noisy-or": "Noisy-OR",
    "p1": "Movies as a dataset (P1)",
    "p2": "Average of each movie as dataset (P2)",
    "nb-limited": "Naive Bayes, limited neighbours",
    "rlr": "RLR, per-item weights",
    "rlr-dropout": "MLN/RLR with relational dropout",
    "mf-stacked": "Matrix factorization",
}


@dataclass
class ExperimentConfig:
    ratings: str
    labels: str
    method: str
    format: str = "ml-100k"
    rating_cutoff_ts: int | None = None
    label_cutoff_ts: int | None = None
    rating_fraction: float = 0.6
    label_fraction: float = 0.4
    params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    cv_folds: int = 5
    metric: str = "log_loss"
    seed: int = 0
    paper_stopping: bool = False
    name: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.metric not in ("log_loss", "mse"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if (self.rating_cutoff_ts is None) != (self.label_cutoff_ts is None):
            raise ConfigError("give both cutoffs or neither")
        if self.rating_cutoff_ts is not None and self.label_cutoff_ts > self.rating_cutoff_ts:
            raise ConfigError("label_cutoff_ts must not exceed rating_cutoff_ts")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid entry {key!r} must be a nonempty list")


@dataclass
class EvalReport:
    method: str
    mse: float
    log_loss: float
    hyperparameters: dict
    n_test: int
    seed: int
    wall_seconds: float
    schema_version: str = SCHEMA_VERSION
    name: str | None = None
    cv_scores: list | None = None
    details: dict = field(default_factory=dict)
    paper_stopping: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


_split_cache: dict = {}


def load_split(config: ExperimentConfig) -> LabeledSplit:
    """Ingest and split, memoised on the dataset part of the config.

    Each call returns a fresh held-out label store so audits stay per-experiment.
    """
    key = (config.ratings, config.labels, config.format, config.rating_cutoff_ts,
           config.label_cutoff_ts, config.rating_fraction, config.label_fraction)
    if key not in _split_cache:
        records = load_ratings(config.ratings, config.format)
        labels = load_user_labels(config.labels, config.format)
        if config.rating_cutoff_ts is None:
            cutoffs = fraction_cutoffs(records, config.rating_fraction, config.label_fraction)
        else:
            cutoffs = (config.rating_cutoff_ts, config.label_cutoff_ts)
        _split_cache[key] = temporal_split(records, labels, *cutoffs)
    cached = _split_cache[key]
    return LabeledSplit(cached.train_graph, cached.train_labels, cached.test_users,
                        type(cached.test_labels)(cached.test_labels._labels))


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except RelaggError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except (OSError, KeyError, ValueError) as exc:
        if name in ("ingest", "split"):
            raise DataError(f"[{name}] {exc}") from exc
        raise TrainingError(f"[{name}] {exc}") from exc
    except Exception as exc:
        raise TrainingError(f"[{name}] {exc}") from exc


def run_experiment(config: ExperimentConfig, split: LabeledSplit | None = None) -> EvalReport:
    """Split, tune on the training users only, refit on all of them, score the test users."""
    start = time.perf_counter()
    if split is None:
        split = _stage("ingest", load_split, config)
    fit = METHODS[config.method]
    graph = split.train_graph
    cache: dict = {}
    params = dict(config.params)

    cv_scores = None
    if config.grid:
        grid = expand_grid(config.grid)

        def train_fn(hp, fold_labels):
            ctx = FitContext(graph, fold_labels, config.seed, cache=cache)
            return fit(ctx, {**params, **hp}).predict

        plan = kfold_plan(split.train_labels, config.cv_folds, config.seed)
        if len(grid) > 1:
            cv_scores = _stage("tune", cross_validate, train_fn, grid, plan, split.train_labels, config.metric)
            params.update(grid[int(np.argmin(cv_scores))])
        else:
            params.update(grid[0])

    stop_labels = None
    if config.paper_stopping:
        # replication mode: stop on the test loss (leaks test labels, logged)
        stop_labels = split.test_labels.reveal("paper-stopping")
    ctx = FitContext(graph, split.train_labels, config.seed, stop_labels, cache)
    fitted = _stage("train", fit, ctx, params)
    predictions = _stage("predict", fitted.predict, split.test_users)

    truth = split.test_labels.reveal("metrics")
    scores = evaluate(predictions, [truth[u] for u in split.test_users])
    return EvalReport(
        method=config.method,
        mse=scores["mse"],
        log_loss=scores["log_loss"],
        hyperparameters=params,
        n_test=len(split.test_users),
        seed=config.seed,
        wall_seconds=round(time.perf_counter() - start, 3),
        name=config.name,
        cv_scores=cv_scores,
        details=fitted.details,
        paper_stopping=config.paper_stopping,
    )


@dataclass
class SuiteResult:
    reports: list[EvalReport]
    errors: list[dict]

    def table(self) -> str:
        return render_table(self.reports)


def run_suite(configs: Sequence[ExperimentConfig]) -> SuiteResult:
    """Run every config in order; failures are recorded and the suite goes on."""
    if not configs:
        raise ConfigError("empty suite")
    reports, errors = [], []
    for cfg in configs:
        try:
            reports.append(run_experiment(cfg))
        except RelaggError as exc:
            logger.error("%s failed: %s", cfg.method, exc)
            errors.append({"method": cfg.method, "name": cfg.name, "error": str(exc),
                           "type": type(exc).__name__})
    return SuiteResult(reports, errors)


def render_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table with one row per report, metrics to three decimals."""
    rows = [(r.name or TABLE_NAMES.get(r.method, r.method), f"{r.mse:.3f}", f"{r.log_loss:.3f}")
            for r in reports]
    width = max([len("Method")] + [len(r[0]) for r in rows])
    lines = [f"{'Method':<{width}} | {'MSE':>5} | {'LL':>5}", f"{'-' * width}-+-------+------"]
    lines += [f"{name:<{width}} | {m:>5} | {ll:>5}" for name, m, ll in rows]
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def reports_to_jsonl(reports: Sequence[EvalReport]) -> str:
    return "".join(json.dumps(r.to_dict(), default=_jsonable) + "\n" for r in reports)


def reports_from_jsonl(text: str) -> list[EvalReport]:
    return [EvalReport(**json.loads(line)) for line in text.splitlines() if line.strip()]


def emit_report(reports: EvalReport | Sequence[EvalReport], path: str | os.PathLike | None,
                format: str = "json") -> str:
    """Serialise reports as JSON lines or a text table; write to ``path`` unless None."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    if format == "json":
        text = reports_to_jsonl(reports)
    elif format in ("table", "text-table"):
        text = render_table(reports)
    else:
        raise ConfigError(f"unknown report format {format!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# -- config files ---------------------------------------------------------------

def _resolve(path: str, base: Path) -> str:
    expanded = os.path.expandvars(path)
    if "$" in expanded:
        raise ConfigError(f"unset environment variable in path {path!r}")
    p = Path(os.path.expanduser(expanded))
    return str(p if p.is_absolute() else base / p)


def load_config(path: str | os.PathLike, **overrides) -> list[ExperimentConfig]:
    """Read a JSON suite file into one :class:`ExperimentConfig` per experiment.

    Top-level keys ``dataset``, ``seed``, ``cv_folds``, ``metric`` and
    ``paper_stopping`` are shared; each entry of ``experiments`` supplies a
    ``method`` and optionally ``params``, ``grid`` and ``name``.  Paths may use
    environment variables and are resolved relative to the file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return configs_from_dict(raw, base=path.parent, **overrides)


def configs_from_dict(raw: Mapping, base: Path = Path("."), **overrides) -> list[ExperimentConfig]:
    try:
        ds = raw["dataset"]
        experiments = raw["experiments"]
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc}") from None
    shared = {
        "ratings": _resolve(ds["ratings"], base),
        "labels": _resolve(ds["labels"], base),
        "format": ds.get("format", "ml-100k"),
        "rating_cutoff_ts": ds.get("rating_cutoff_ts"),
        "label_cutoff_ts": ds.get("label_cutoff_ts"),
        "rating_fraction": ds.get("rating_fraction", 0.6),
        "label_fraction": ds.get("label_fraction", 0.4),
        "cv_folds": raw.get("cv_folds", 5),
        "metric": raw.get("metric", "log_loss"),
        "seed": raw.get("seed", 0),
        "paper_stopping": raw.get("paper_stopping", False),
    }
    shared.update({k: v for k, v in overrides.items() if v is not None})
    out = []
    for exp in experiments:
        unknown = set(exp) - {"method", "params", "grid", "name"}
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        try:
            out.append(ExperimentConfig(method=exp["method"], params=dict(exp.get("params", {})),
                                        grid=dict(exp.get("grid", {})), name=exp.get("name"), **shared))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    return out
