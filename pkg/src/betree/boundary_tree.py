"""Online boundary tree over raw training samples.

Queries descend greedily by embedding-space distance; a misclassified query
is stored as a child of the node that produced the wrong answer, so every
edge joins differently-labeled samples. Nodes live in an arena and are
addressed by integer ids that ascend in insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import l2_value

STOP_STAYED = "stayed"
STOP_LEAF = "leaf"


@dataclass(frozen=True)
class Sample:
    """One raw training point: a feature vector plus a class index."""

    features: np.ndarray
    label: int

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "label", int(self.label))
        if self.features.ndim != 1:
            raise ValueError(f"sample features must be rank 1, got shape {self.features.shape}")
        if self.label < 0:
            raise ValueError(f"sample label must be >= 0, got {self.label}")


@dataclass
class TreeNode:
    id: int
    sample: Sample
    parent: int | None
    children: list[int] = field(default_factory=list)
    # (embedder cache_key, embedded vector); stale entries are recomputed.
    emb_cache: tuple | None = None

    @property
    def label(self) -> int:
        return self.sample.label


@dataclass
class TraceStep:
    """One traversal decision: candidates are the decision node first (unless
    excluded by the max_children rule) then its children, ids ascending."""

    node: int
    candidates: list[int]
    distances: np.ndarray
    chosen: int  # index into candidates

    @property
    def chosen_id(self) -> int:
        return self.candidates[self.chosen]


@dataclass
class Trace:
    steps: list[TraceStep]
    final: int
    stop_mode: str  # STOP_STAYED or STOP_LEAF

    @property
    def visited(self) -> list[int]:
        seq = [self.steps[0].node] if self.steps else [self.final]
        for s in self.steps:
            if s.chosen_id != s.node:
                seq.append(s.chosen_id)
        return seq


class BoundaryTree:
    """Arena-backed tree; node 0 is always the root.

    max_children of None means unbounded fan-out. With a finite bound, a node
    that is full is excluded from its own candidate set, which forces the
    traversal to descend past it.
    """

    def __init__(self, first: Sample, max_children: int | None = None, class_count: int = 2):
        if max_children is not None and max_children < 1:
            raise ValueError(f"max_children must be >= 1 or None, got {max_children}")
        if not 0 <= first.label < class_count:
            raise ValueError(f"root label {first.label} outside [0, {class_count})")
        self.nodes: list[TreeNode] = [TreeNode(0, first, None)]
        self.root = 0
        self.max_children = max_children
        self.class_count = class_count

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def feature_dim(self) -> int:
        return self.nodes[0].sample.features.shape[0]

    def edges(self):
        for node in self.nodes:
            for c in node.children:
                yield node.id, c

    def add_child(self, parent: int, sample: Sample) -> int:
        if not 0 <= sample.label < self.class_count:
            raise ValueError(f"label {sample.label} outside [0, {self.class_count})")
        if sample.features.shape != (self.feature_dim,):
            raise ValueError(
                f"feature length {sample.features.shape[0]} does not match tree dim {self.feature_dim}"
            )
        node = TreeNode(len(self.nodes), sample, parent)
        self.nodes.append(node)
        self.nodes[parent].children.append(node.id)
        return node.id


def new_tree(first: Sample, max_children: int | None = None, class_count: int = 2) -> BoundaryTree:
    return BoundaryTree(first, max_children, class_count)


def node_embedding(tree: BoundaryTree, node_id: int, embed) -> np.ndarray:
    """Embedded node features, cached per embedder stamp.

    Safe under concurrent read-only queries: both racers would write the
    same deterministic value.
    """
    node = tree.nodes[node_id]
    key = embed.cache_key
    cached = node.emb_cache
    if cached is not None and cached[0] == key:
        return cached[1]
    vec = np.asarray(embed(node.sample.features), dtype=np.float64)
    node.emb_cache = (key, vec)
    return vec


def candidate_ids(tree: BoundaryTree, node_id: int) -> list[int]:
    """Traversal candidates at a node: itself plus its children, except that
    a node at the max_children bound cannot be its own candidate."""
    node = tree.nodes[node_id]
    if tree.max_children is not None and len(node.children) >= tree.max_children:
        return list(node.children)
    return [node_id, *node.children]


def traverse(tree: BoundaryTree, embed, y) -> Trace:
    """Greedy root-to-final descent for a raw query vector.

    At each node with children, move to the distance argmin over the
    candidate set; equal distances resolve to the lowest node id (candidate
    lists ascend by id, so the first minimum wins). Stops when the argmin is
    the current node or a childless node is reached.
    """
    y_emb = np.asarray(embed(y), dtype=np.float64)
    steps: list[TraceStep] = []
    current = tree.root
    while True:
        if not tree.nodes[current].children:
            return Trace(steps, current, STOP_LEAF)
        cands = candidate_ids(tree, current)
        dists = np.array([l2_value(y_emb, node_embedding(tree, c, embed)) for c in cands])
        chosen = int(np.argmin(dists))
        steps.append(TraceStep(current, cands, dists, chosen))
        nxt = cands[chosen]
        if nxt == current:
            return Trace(steps, current, STOP_STAYED)
        current = nxt


def predict_hard(tree: BoundaryTree, embed, y) -> int:
    """Label of the node where traversal stops."""
    return tree.nodes[traverse(tree, embed, y).final].label


def insert_if_wrong(tree: BoundaryTree, embed, query: Sample) -> bool:
    """Train on one sample: store it only if the tree misclassifies it.

    Returns True when a node was added. The new node hangs off the final
    node of the failed query, so the new edge crosses a class boundary.
    """
    final = traverse(tree, embed, query.features).final
    if tree.nodes[final].label == query.label:
        return False
    tree.add_child(final, query)
    return True


def build_tree(samples, embed, max_children: int | None = None, class_count: int = 2) -> BoundaryTree:
    """Feed samples through insert_if_wrong in order; the first becomes the root."""
    samples = list(samples)
    if not samples:
        raise ValueError("build_tree: empty sample list")
    dim = samples[0].features.shape[0]
    for i, s in enumerate(samples):
        if s.features.shape != (dim,):
            raise ValueError(f"build_tree: sample {i} has feature length {s.features.shape[0]}, expected {dim}")
    tree = new_tree(samples[0], max_children, class_count)
    for s in samples[1:]:
        insert_if_wrong(tree, embed, s)
    return tree


# ---- snapshot files --------------------------------------------------------
#
# Text header, then a count line "n dim C", then per node one text line
# "id parent label" followed by the node's raw features as little-endian
# float64. Nodes appear in id order; children lists are rebuilt from the
# parent column. max_children is a query-time setting and is not stored.

TREE_MAGIC = "BETREE-TREE v1"


class TreeFormatError(ValueError):
    """Tree snapshot file does not match the expected layout."""


def save_tree(tree: BoundaryTree, path) -> None:
    with open(path, "wb") as f:
        f.write(f"{TREE_MAGIC}\n".encode("ascii"))
        f.write(f"{len(tree)} {tree.feature_dim} {tree.class_count}\n".encode("ascii"))
        for node in tree.nodes:
            parent = -1 if node.parent is None else node.parent
            f.write(f"{node.id} {parent} {node.label}\n".encode("ascii"))
            f.write(node.sample.features.astype("<f8").tobytes())


def load_tree(path, max_children: int | None = None) -> BoundaryTree:
    with open(path, "rb") as f:
        buf = f.read()

    def read_line(pos):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise TreeFormatError("unterminated header line")
        return buf[pos:end].decode("ascii", errors="replace"), end + 1

    line, pos = read_line(0)
    if line != TREE_MAGIC:
        raise TreeFormatError(f"bad tree magic {line!r}, expected {TREE_MAGIC!r}")
    line, pos = read_line(pos)
    parts = line.split()
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise TreeFormatError(f"bad tree count line {line!r}, expected 'count dim classes'")
    count, dim, class_count = (int(p) for p in parts)
    if count < 1:
        raise TreeFormatError("tree snapshot has no nodes")

    tree = None
    entries = []
    for i in range(count):
        line, pos = read_line(pos)
        fields = line.split()
        if len(fields) != 3:
            raise TreeFormatError(f"bad node line {line!r}, expected 'id parent label'")
        nid, parent, label = (int(x) for x in fields)
        if nid != i:
            raise TreeFormatError(f"node ids must be sequential, got {nid} at position {i}")
        if len(buf) - pos < dim * 8:
            raise TreeFormatError(f"truncated feature payload at node {nid}")
        feats = np.frombuffer(buf, "<f8", dim, pos).copy()
        pos += dim * 8
        entries.append((nid, parent, label, feats))
    if pos != len(buf):
        raise TreeFormatError(f"{len(buf) - pos} trailing bytes after last node")

    for nid, parent, label, feats in entries:
        if nid == 0:
            if parent != -1:
                raise TreeFormatError("node 0 must be the root (parent -1)")
            tree = BoundaryTree(Sample(feats, label), max_children, class_count)
        else:
            if not 0 <= parent < nid:
                raise TreeFormatError(f"node {nid} has invalid parent {parent}")
            tree.add_child(parent, Sample(feats, label))
    return tree
