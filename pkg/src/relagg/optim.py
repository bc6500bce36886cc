"""Minibatch SGD, finite-difference gradient checks and k-fold tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import metrics
from .errors import TrainingError

logger = logging.getLogger(__name__)

LossGrad = tuple[float, np.ndarray]


@dataclass
class Objective:
    """A differentiable loss over ``n_examples`` training examples.

    ``eval(params, batch)`` returns the loss and its gradient, averaged over the
    examples in ``batch`` (all examples when ``batch`` is None).  ``resample``
    is called at the start of every epoch for objectives whose examples are
    themselves random (relational dropout).
    """

    dimension: int
    n_examples: int
    eval: Callable[[np.ndarray, np.ndarray | None], LossGrad]
    description: str = ""
    resample: Callable[[], None] | None = None

    def __call__(self, params: np.ndarray, batch: np.ndarray | None = None) -> LossGrad:
        return self.eval(params, batch)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    epochs: int = 500
    batch_size: int = 32
    l2_penalty: float = 0.0
    seed: int = 0
    # None: train for exactly `epochs`; otherwise stop once the validation
    # loss has not improved for `patience` epochs.
    patience: int | None = 10
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")

    def replace(self, **changes) -> "SgdConfig":
        return type(self)(**{**self.__dict__, **changes})


def _check_finite(loss, grad, where: str) -> None:
    if not np.isfinite(loss) or (grad is not None and not np.all(np.isfinite(grad))):
        raise TrainingError(f"non-finite loss or gradient at {where}")


def sgd_minimize(
    objective: Objective,
    init: np.ndarray,
    config: SgdConfig,
    validation: Callable[[np.ndarray], float] | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Minimise ``objective`` by minibatch SGD and return the best iterate seen.

    "Best" is judged by ``validation(params)`` when given, otherwise by the
    full training loss at the end of each epoch.  The initial point counts as
    epoch 0, so the result is never worse than ``init`` on that criterion.
    Early stopping applies only when a validation function is supplied and
    ``config.patience`` is set.  ``trace`` receives one monitored loss per epoch.
    """
    x = np.array(init, dtype=float, copy=True)
    if x.shape != (objective.dimension,):
        raise ValueError(f"init has shape {x.shape}, objective expects ({objective.dimension},)")
    rng = np.random.default_rng(config.seed)

    def monitor(params, epoch):
        value = validation(params) if validation is not None else objective(params)[0]
        _check_finite(value, None, f"epoch {epoch}")
        return value

    best = x.copy()
    best_loss = monitor(x, 0)
    if trace is not None:
        trace.append(best_loss)
    stale = 0
    n = objective.n_examples
    for epoch in range(1, config.epochs + 1):
        if objective.resample is not None:
            objective.resample()
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = objective(x, batch)
            _check_finite(loss, grad, f"epoch {epoch}, batch starting {start}")
            x -= config.learning_rate * grad
        current = monitor(x, epoch)
        if trace is not None:
            trace.append(current)
        if current < best_loss:
            best_loss = current
            best = x.copy()
            stale = 0
        else:
            stale += 1
            if validation is not None and config.patience is not None and stale >= config.patience:
                logger.debug("early stop at epoch %d (best %.5f)", epoch, best_loss)
                break
    return best


def fit_with_stopping(
    make_objective: Callable[[Sequence[str]], Objective],
    make_validation: Callable[[Sequence[str]], Callable[[np.ndarray], float]],
    users: Sequence[str],
    init: np.ndarray,
    config: SgdConfig,
    stop_users: Sequence[str] | None = None,
) -> np.ndarray:
    """Train with the stopping rule in ``config``.

    With ``patience`` set, a random ``validation_fraction`` of ``users`` is held
    out to find the best epoch count, then the model is refit on all users for
    that many epochs.  ``stop_users`` overrides the hold-out: training uses all
    of ``users`` and stops on ``stop_users`` directly (no refit).
    """
    users = list(users)
    if config.patience is None:
        return sgd_minimize(make_objective(users), init, config)
    if stop_users is not None:
        return sgd_minimize(make_objective(users), init, config, validation=make_validation(stop_users))

    rng = np.random.default_rng([config.seed, 7919])
    n_val = max(1, int(round(config.validation_fraction * len(users))))
    if len(users) - n_val < 1:
        return sgd_minimize(make_objective(users), init, config.replace(patience=None))
    perm = rng.permutation(len(users))
    val = [users[i] for i in perm[:n_val]]
    fit = [users[i] for i in sorted(perm[n_val:])]
    trace: list[float] = []
    sgd_minimize(make_objective(fit), init, config, validation=make_validation(val), trace=trace)
    best_epochs = int(np.argmin(trace))
    logger.debug("validation picked %d epochs", best_epochs)
    if best_epochs == 0:
        return np.array(init, dtype=float, copy=True)
    return sgd_minimize(make_objective(users), init, config.replace(epochs=best_epochs, patience=None))


def grad_check(objective: Objective, point: np.ndarray, h: float = 1e-5) -> float:
    """Largest relative discrepancy between analytic and central-difference gradients."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point, dtype=float)
    _, analytic = objective(x)
    numeric = np.empty_like(x)
    for j in range(len(x)):
        step = np.zeros_like(x)
        step[j] = h
        f_plus = objective(x + step)[0]
        f_minus = objective(x - step)[0]
        _check_finite(f_plus + f_minus, None, f"coordinate {j}")
        numeric[j] = (f_plus - f_minus) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Mapping[str, int]

    def folds(self) -> list[tuple[list[str], list[str]]]:
        """``(train_users, held_out_users)`` for each fold, in a stable order."""
        out = []
        for f in range(self.k):
            train = [u for u, a in self.assignments.items() if a != f]
            held = [u for u, a in self.assignments.items() if a == f]
            out.append((train, held))
        return out


def kfold_plan(users: Iterable[str], k: int = 5, seed: int = 0) -> FoldPlan:
    users = sorted(set(users))
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(users) < k:
        raise ValueError(f"need at least {k} users for {k}-fold CV, got {len(users)}")
    perm = np.random.default_rng(seed).permutation(len(users))
    return FoldPlan(k, {users[i]: pos % k for pos, i in enumerate(perm)})


Predictor = Callable[[Sequence[str]], np.ndarray]
TrainFn = Callable[[dict, dict], Predictor]

_METRICS = {"log_loss": metrics.log_loss, "mse": metrics.mse}


def cross_validate(
    train_fn: TrainFn,
    grid: Sequence[dict],
    plan: FoldPlan,
    labels: Mapping[str, int],
    metric: str = "log_loss",
) -> list[float]:
    """Mean held-out-fold ``metric`` for each grid point.

    ``train_fn(hyperparams, fold_train_labels)`` must return a function mapping
    a list of users to probabilities.
    """
    score = _METRICS[metric]
    folds = plan.folds()
    results = []
    for hp in grid:
        fold_scores = []
        for f, (train_users, held) in enumerate(folds):
            fold_labels = {u: labels[u] for u in train_users}
            try:
                predict = train_fn(hp, fold_labels)
                p = metrics.clip(predict(held))
            except Exception as exc:
                raise TrainingError(f"training failed for {hp} on fold {f}: {exc}") from exc
            fold_scores.append(score(p, [labels[u] for u in held]))
        results.append(float(np.mean(fold_scores)))
        logger.debug("cv %s -> %.5f", hp, results[-1])
    return results


def tune(
    train_fn: TrainFn,
    grid: Sequence[dict],
    plan: FoldPlan,
    labels: Mapping[str, int],
    metric: str = "log_loss",
) -> dict:
    """Grid point with the lowest mean held-out metric (first one on ties)."""
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if len(grid) == 1:
        return dict(grid[0])
    scores = cross_validate(train_fn, grid, plan, labels, metric)
    return dict(grid[int(np.argmin(scores))])


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    """Cartesian product of ``{name: values}`` as a list of dicts, in row-major order."""
    points: list[dict] = [{}]
    for name, values in grid.items():
        points = [{**p, name: v} for p in points for v in values]
    return points
