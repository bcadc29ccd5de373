"""Suite-wide hooks: every BoundaryTree constructed anywhere in the test run
is registered and audited for the edge-boundary invariant at session end."""

import pytest

from betree.boundary_tree import BoundaryTree

_ALL_TREES = []
_orig_init = BoundaryTree.__init__


def _recording_init(self, *args, **kwargs):
    _orig_init(self, *args, **kwargs)
    _ALL_TREES.append(self)


BoundaryTree.__init__ = _recording_init


def registered_trees():
    return list(_ALL_TREES)


def violating_edges(tree):
    return [(a, b) for a, b in tree.edges() if tree.nodes[a].label == tree.nodes[b].label]


@pytest.fixture(scope="session", autouse=True)
def _edge_boundary_audit():
    """After the whole session, every tree the suite ever built must have
    differently-labeled endpoints on every edge."""
    yield
    bad = [(id(t), violating_edges(t)) for t in _ALL_TREES if violating_edges(t)]
    assert not bad, f"trees violating the edge-boundary invariant: {bad}"
