"""Rating/label ingestion, the binarised user-item graph and the temporal split.

Ratings are reduced to a polarity: a rating of 4 or 5 is *positive*, anything
lower is *negative*.  Pairs that were never rated are simply absent from the
graph; there is no third "unobserved" polarity.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import DataError

FEMALE = 1
MALE = 0

POSITIVE_THRESHOLD = 4

_RATING_SEPARATORS = {
    "ml-100k": "\t",
    "tab": "\t",
    "ml-1m": "::",
    "dat": "::",
}

# (separator, zero-based gender column)
_LABEL_LAYOUTS = {
    "ml-100k": ("|", 2),
    "ml-1m": ("::", 1),
}


class RatingRecord(NamedTuple):
    user_id: str
    item_id: str
    rating: int
    timestamp: int


def _read_lines(path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def load_ratings(path: str | os.PathLike, format: str = "ml-100k") -> list[RatingRecord]:
    """Read a ratings file, keeping file order.

    ``format`` selects the separator: ``"ml-100k"``/``"tab"`` for tab-separated
    ``u.data`` files, ``"ml-1m"``/``"dat"`` for ``::``-separated ``ratings.dat``.
    """
    try:
        sep = _RATING_SEPARATORS[format]
    except KeyError:
        raise DataError(f"unknown ratings format {format!r}") from None

    records = []
    for lineno, line in _read_lines(path):
        fields = line.split(sep)
        if len(fields) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}: {line!r}")
        user, item, rating, ts = (f.strip() for f in fields)
        try:
            rating_i = int(rating)
            ts_i = int(ts)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer rating or timestamp: {line!r}") from None
        if not 1 <= rating_i <= 5:
            raise DataError(f"{path}:{lineno}: rating {rating_i} outside 1..5: {line!r}")
        if ts_i < 0:
            raise DataError(f"{path}:{lineno}: negative timestamp: {line!r}")
        records.append(RatingRecord(user, item, rating_i, ts_i))
    return records


def load_user_labels(path: str | os.PathLike, format: str = "ml-100k") -> dict[str, int]:
    """Read the user file and return ``{user_id: FEMALE | MALE}``."""
    try:
        sep, col = _LABEL_LAYOUTS[format]
    except KeyError:
        raise DataError(f"unknown labels format {format!r}") from None

    labels: dict[str, int] = {}
    for lineno, line in _read_lines(path):
        fields = line.split(sep)
        if len(fields) <= col:
            raise DataError(f"{path}:{lineno}: too few fields: {line!r}")
        user = fields[0].strip()
        gender = fields[col].strip()
        if gender == "F":
            value = FEMALE
        elif gender == "M":
            value = MALE
        else:
            raise DataError(f"{path}:{lineno}: gender must be 'M' or 'F', got {gender!r}")
        if user in labels:
            raise DataError(f"{path}:{lineno}: duplicate user id {user!r}")
        labels[user] = value
    return labels


class RatingGraph:
    """Bipartite user-item graph with binary edge polarity.

    Edges are stored once, grouped by user (CSR style); a second permutation
    groups the same edges by item.  Ids are opaque strings and are indexed in
    order of first appearance.
    """

    def __init__(
        self,
        edges: Iterable[tuple[str, str, bool]],
        extra_users: Iterable[str] = (),
    ):
        user_index: dict[str, int] = {}
        item_index: dict[str, int] = {}
        seen: set[tuple[int, int]] = set()
        eu, ei, ep = [], [], []
        for user, item, positive in edges:
            u = user_index.setdefault(user, len(user_index))
            i = item_index.setdefault(item, len(item_index))
            if (u, i) in seen:
                raise DataError(f"duplicate edge ({user!r}, {item!r})")
            seen.add((u, i))
            eu.append(u)
            ei.append(i)
            ep.append(bool(positive))
        for user in extra_users:
            user_index.setdefault(user, len(user_index))

        self.users: tuple[str, ...] = tuple(user_index)
        self.items: tuple[str, ...] = tuple(item_index)
        self.user_index = user_index
        self.item_index = item_index

        eu_a = np.asarray(eu, dtype=np.int64)
        order = np.argsort(eu_a, kind="stable")
        self.edge_user = eu_a[order]
        self.edge_item = np.asarray(ei, dtype=np.int64)[order]
        self.edge_positive = np.asarray(ep, dtype=bool)[order]
        self.user_ptr = np.zeros(len(self.users) + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.edge_user, minlength=len(self.users)), out=self.user_ptr[1:])

        self.item_order = np.argsort(self.edge_item, kind="stable")
        self.item_ptr = np.zeros(len(self.items) + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.edge_item, minlength=len(self.items)), out=self.item_ptr[1:])

    @classmethod
    def from_records(cls, records: Iterable[RatingRecord], extra_users: Iterable[str] = ()) -> "RatingGraph":
        return cls(((r.user_id, r.item_id, r.rating >= POSITIVE_THRESHOLD) for r in records), extra_users)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_edges(self) -> int:
        return len(self.edge_user)

    def __contains__(self, user: str) -> bool:
        return user in self.user_index

    def degrees(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    def user_edge_slice(self, user: str) -> slice:
        """Positions of ``user``'s edges in the edge arrays (empty for unknown users)."""
        u = self.user_index.get(user)
        if u is None:
            return slice(0, 0)
        return slice(int(self.user_ptr[u]), int(self.user_ptr[u + 1]))

    def user_edges(self, user: str) -> list[tuple[str, bool]]:
        s = self.user_edge_slice(user)
        return [(self.items[i], bool(p)) for i, p in zip(self.edge_item[s], self.edge_positive[s])]

    def item_edges(self, item: str) -> list[tuple[str, bool]]:
        i = self.item_index[item]
        idx = self.item_order[self.item_ptr[i]:self.item_ptr[i + 1]]
        return [(self.users[u], bool(p)) for u, p in zip(self.edge_user[idx], self.edge_positive[idx])]

    def rated_matrix(self, polarity: bool | None = None) -> sp.csr_matrix:
        """Users x items 0/1 matrix; restrict to one polarity if given."""
        mask = np.ones(self.n_edges, dtype=bool) if polarity is None else self.edge_positive == polarity
        data = np.ones(int(mask.sum()))
        return sp.csr_matrix(
            (data, (self.edge_user[mask], self.edge_item[mask])),
            shape=(self.n_users, self.n_items),
        )

    def user_indices(self, users: Iterable[str]) -> np.ndarray:
        return np.array([self.user_index[u] for u in users], dtype=np.int64)


class AuditedLabels:
    """Held-out labels that can only be read through :meth:`reveal`.

    Every read is logged with its stated purpose so tests can check that
    nothing but evaluation touched them.
    """

    def __init__(self, labels: Mapping[str, int]):
        self._labels = dict(labels)
        self.access_log: list[str] = []

    def __len__(self) -> int:
        return len(self._labels)

    def keys(self):
        return self._labels.keys()

    def reveal(self, purpose: str) -> dict[str, int]:
        self.access_log.append(purpose)
        return dict(self._labels)


@dataclass
class LabeledSplit:
    train_graph: RatingGraph
    train_labels: dict[str, int]
    test_users: list[str]
    test_labels: AuditedLabels = field(repr=False)

    @property
    def train_users(self) -> list[str]:
        return list(self.train_labels)


def temporal_split(
    records: list[RatingRecord],
    labels: Mapping[str, int],
    rating_cutoff_ts: int,
    label_cutoff_ts: int,
) -> LabeledSplit:
    """Split users into labelled training users and test users by timestamps.

    The evidence graph holds every rating with ``timestamp <= rating_cutoff_ts``.
    Users whose first such rating is at or before ``label_cutoff_ts`` are
    training users; the rest are test users.
    """
    if not records:
        raise DataError("no rating records")
    if label_cutoff_ts > rating_cutoff_ts:
        raise DataError("label cutoff must not exceed rating cutoff")

    kept = [r for r in records if r.timestamp <= rating_cutoff_ts]
    first_seen: dict[str, int] = {}
    for r in kept:
        prev = first_seen.get(r.user_id)
        if prev is None or r.timestamp < prev:
            first_seen[r.user_id] = r.timestamp

    missing = sorted(u for u in first_seen if u not in labels)
    if missing:
        raise DataError(f"users without labels: {missing[:20]}{' ...' if len(missing) > 20 else ''}")

    graph = RatingGraph.from_records(kept)
    train_labels = {u: labels[u] for u in graph.users if first_seen[u] <= label_cutoff_ts}
    test_users = [u for u in graph.users if first_seen[u] > label_cutoff_ts]
    return LabeledSplit(
        train_graph=graph,
        train_labels=train_labels,
        test_users=test_users,
        test_labels=AuditedLabels({u: labels[u] for u in test_users}),
    )


def fraction_cutoffs(records: list[RatingRecord], rating_fraction: float = 0.6,
                     label_fraction: float = 0.4) -> tuple[int, int]:
    """Timestamps bounding the first ``rating_fraction`` / ``label_fraction`` of ratings.

    On ml-100k with (0.6, 0.4) this yields (884673930, 880845177).
    """
    if not 0 < label_fraction <= rating_fraction <= 1:
        raise DataError("need 0 < label_fraction <= rating_fraction <= 1")
    ts = np.sort(np.fromiter((r.timestamp for r in records), dtype=np.int64, count=len(records)))
    n = len(ts)
    return int(ts[int(round(rating_fraction * n)) - 1]), int(ts[int(round(label_fraction * n)) - 1])
