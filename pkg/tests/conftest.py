from __future__ import annotations

import os
from pathlib import Path

import pytest

from relagg.dataset import FEMALE, MALE, RatingGraph, RatingRecord

ML100K = Path(os.environ.get("RELAGG_ML100K", "/root/data/ml-100k"))


def make_graph(edges, extra_users=()):
    """Graph from ``(user, item, positive)`` triples."""
    records = [RatingRecord(u, i, 5 if pos else 1, t) for t, (u, i, pos) in enumerate(edges)]
    return RatingGraph.from_records(records, extra_users=extra_users)


def counts_graph(counts, prefix="u"):
    """One user per ``(npr, nnr)`` row, each rating on a fresh item."""
    edges, users = [], []
    for n, (npr, nnr) in enumerate(counts):
        u = f"{prefix}{n}"
        users.append(u)
        edges += [(u, f"{u}+{j}", True) for j in range(npr)]
        edges += [(u, f"{u}-{j}", False) for j in range(nnr)]
    return make_graph(edges, extra_users=users), users


@pytest.fixture
def small_graph():
    # items a..d, users f1 f2 (female) m1 m2 (male), t1 unlabelled
    edges = [
        ("f1", "a", True), ("f1", "b", True), ("f1", "c", False),
        ("f2", "a", True), ("f2", "d", False),
        ("m1", "b", False), ("m1", "c", True), ("m1", "d", True),
        ("m2", "c", True), ("m2", "d", True), ("m2", "a", False),
        ("t1", "a", True), ("t1", "c", True),
    ]
    labels = {"f1": FEMALE, "f2": FEMALE, "m1": MALE, "m2": MALE}
    return make_graph(edges), labels


@pytest.fixture(scope="session")
def ml100k_dir():
    return ML100K


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
