"""Aggregators for predicting a binary property of an object from the
variable-size set of relations it takes part in (e.g. a user's gender from the
movies they rated)."""

__version__ = "0.1.0"

from .dataset import (  # noqa: E402
    FEMALE,
    MALE,
    LabeledSplit,
    RatingGraph,
    RatingRecord,
    load_ratings,
    load_user_labels,
    temporal_split,
)
from .metrics import log_loss, mse  # noqa: E402
from .optim import SgdConfig  # noqa: E402

__all__ = [
    "FEMALE",
    "MALE",
    "LabeledSplit",
    "RatingGraph",
    "RatingRecord",
    "SgdConfig",
    "load_ratings",
    "load_user_labels",
    "log_loss",
    "mse",
    "temporal_split",
]
