"""Graph data model, TUDataset ingestion, fold splitting and structural augmenters.

Graphs are stored in a normalized form: undirected edges appear once as
``(u, v)`` with ``u < v``, sorted lexicographically, and never as self-loops.
All stochastic operators take an explicit ``numpy.random.Generator`` and are
pure functions of their inputs and the generator state.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """Base class for dataset problems."""


class IngestionError(DatasetError):
    """A mandatory dataset file is missing or unsupported."""


class ParseError(DatasetError):
    """A dataset file has malformed content."""

    def __init__(self, path: Path, line: int, message: str):
        self.path = Path(path)
        self.line = line
        super().__init__(f"{self.path.name}:{line}: {message}")


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def _normalize_edges(edges, node_count: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.min() < 0 or arr.max() >= node_count:
        raise ContractError("edge endpoint out of range")
    arr = np.sort(arr, axis=1)
    arr = arr[arr[:, 0] != arr[:, 1]]
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


@dataclass(eq=False)
class Graph:
    """An undirected graph with node features and a class label."""

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    label: int

    def __post_init__(self):
        if self.node_count < 1:
            raise ContractError("a graph needs at least one node")
        self.edges = _normalize_edges(self.edges, self.node_count)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.node_count:
            raise ContractError(
                f"features must be {self.node_count} x d, got {self.features.shape}"
            )
        self.label = int(self.label)

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        if self.edge_count:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def replace(self, **changes) -> "Graph":
        kwargs = dict(
            node_count=self.node_count,
            edges=self.edges,
            features=self.features,
            label=self.label,
        )
        kwargs.update(changes)
        return Graph(**kwargs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and self.label == other.label
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
        )


@dataclass
class GraphDataset:
    graphs: list[Graph]
    num_classes: int
    feature_dim: int
    name: str = "dataset"

    def __post_init__(self):
        for i, g in enumerate(self.graphs):
            if g.feature_dim != self.feature_dim:
                raise ContractError(
                    f"graph {i} has feature_dim {g.feature_dim}, expected {self.feature_dim}"
                )
            if not 0 <= g.label < self.num_classes:
                raise ContractError(f"graph {i} label {g.label} outside 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, idx):
        return self.graphs[idx]

    def subset(self, indices: Sequence[int]) -> "GraphDataset":
        return GraphDataset(
            [self.graphs[i] for i in indices], self.num_classes, self.feature_dim, self.name
        )

    def with_graphs(self, graphs: list[Graph]) -> "GraphDataset":
        return GraphDataset(list(graphs), self.num_classes, self.feature_dim, self.name)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def manifest(self) -> dict:
        hist = Counter(int(g.label) for g in self.graphs)
        n_nodes = [g.node_count for g in self.graphs]
        n_edges = [g.edge_count for g in self.graphs]
        return {
            "name": self.name,
            "num_graphs": len(self.graphs),
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "class_histogram": [hist.get(c, 0) for c in range(self.num_classes)],
            "mean_nodes": float(np.mean(n_nodes)) if n_nodes else 0.0,
            "mean_edges": float(np.mean(n_edges)) if n_edges else 0.0,
            "max_degree": max((int(g.degrees().max()) for g in self.graphs), default=0),
        }


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_indices: list[int] = field(default_factory=list)
    val_indices: list[int] = field(default_factory=list)
    test_indices: list[int] = field(default_factory=list)


# --------------------------------------------------------------------------- #
# TUDataset ingestion
# --------------------------------------------------------------------------- #


def _read_int_rows(path: Path, width: int) -> list[list[int]]:
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")]
            if len(tokens) != width:
                raise ParseError(path, lineno, f"expected {width} value(s), got {len(tokens)}")
            try:
                rows.append([int(t) for t in tokens])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer token in {line!r}") from None
    return rows


def parse_tud_dataset(
    root_path, name: str, use_node_attributes: bool = False
) -> GraphDataset:
    """Load a dataset stored in the TU Dortmund text layout.

    Node ids in ``<name>_A.txt`` are global and 1-indexed; they are remapped to
    0-based ids local to each graph. Graph labels are remapped to
    ``0..C-1`` following the sorted order of the raw values, and node labels
    (when present) become one-hot features in the same way. Edge label and
    node attribute files are ignored.
    """
    root = Path(root_path)
    if use_node_attributes:
        raise IngestionError(
            "real-valued node attributes are not supported; only discrete node labels"
        )
    paths = {
        key: root / f"{name}_{key}.txt" for key in ("A", "graph_indicator", "graph_labels")
    }
    for p in paths.values():
        if not p.is_file():
            raise IngestionError(f"missing mandatory file {p.name} in {root}")

    indicator = [r[0] for r in _read_int_rows(paths["graph_indicator"], 1)]
    raw_labels = [r[0] for r in _read_int_rows(paths["graph_labels"], 1)]
    n_graphs = len(raw_labels)
    n_nodes = len(indicator)
    if n_nodes == 0 or n_graphs == 0:
        raise IngestionError(f"dataset {name} is empty")

    graph_of = np.asarray(indicator, dtype=np.int64) - 1
    if graph_of.min() < 0 or graph_of.max() >= n_graphs:
        bad = int(np.flatnonzero((graph_of < 0) | (graph_of >= n_graphs))[0])
        raise ParseError(paths["graph_indicator"], bad + 1, "graph id out of range")
    if np.any(np.diff(graph_of) < 0):
        bad = int(np.flatnonzero(np.diff(graph_of) < 0)[0]) + 1
        raise ParseError(paths["graph_indicator"], bad + 1, "graph ids must be non-decreasing")
    counts = np.bincount(graph_of, minlength=n_graphs)
    if np.any(counts == 0):
        raise IngestionError(f"graph {int(np.flatnonzero(counts == 0)[0]) + 1} has no nodes")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    edge_lists: list[list[tuple[int, int]]] = [[] for _ in range(n_graphs)]
    with open(paths["A"]) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")]
            if len(tokens) != 2:
                raise ParseError(paths["A"], lineno, "expected 'u, v'")
            try:
                u, v = int(tokens[0]) - 1, int(tokens[1]) - 1
            except ValueError:
                raise ParseError(paths["A"], lineno, f"non-integer token in {line!r}") from None
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise ParseError(paths["A"], lineno, f"dangling node id in {line!r}")
            g = graph_of[u]
            if graph_of[v] != g:
                raise ParseError(paths["A"], lineno, "edge joins nodes of different graphs")
            edge_lists[g].append((u - offsets[g], v - offsets[g]))

    node_label_path = root / f"{name}_node_labels.txt"
    if node_label_path.is_file():
        node_labels = [r[0] for r in _read_int_rows(node_label_path, 1)]
        if len(node_labels) != n_nodes:
            raise ParseError(
                node_label_path, len(node_labels), f"expected {n_nodes} node labels"
            )
        values = sorted(set(node_labels))
        index = {v: i for i, v in enumerate(values)}
        all_features = np.zeros((n_nodes, len(values)))
        all_features[np.arange(n_nodes), [index[v] for v in node_labels]] = 1.0
    else:
        all_features = np.zeros((n_nodes, 0))

    label_values = sorted(set(raw_labels))
    label_index = {v: i for i, v in enumerate(label_values)}
    graphs = []
    for g in range(n_graphs):
        lo, hi = offsets[g], offsets[g] + counts[g]
        graphs.append(
            Graph(
                node_count=int(counts[g]),
                edges=np.array(edge_lists[g], dtype=np.int64).reshape(-1, 2),
                features=all_features[lo:hi],
                label=label_index[raw_labels[g]],
            )
        )
    return GraphDataset(graphs, len(label_values), all_features.shape[1], name)


def write_tud_dataset(dataset: GraphDataset, root_path, name: str | None = None) -> Path:
    """Write ``dataset`` in the TUD layout; one-hot features become node labels."""
    name = name or dataset.name
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, node_lines = [], [], []
    onehot = all(
        g.feature_dim > 0
        and np.all((g.features == 0) | (g.features == 1))
        and np.all(g.features.sum(axis=1) == 1)
        for g in dataset.graphs
    )
    offset = 0
    for gid, g in enumerate(dataset.graphs, start=1):
        for u, v in g.edges:
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}")
        ind_lines.extend([str(gid)] * g.node_count)
        if onehot:
            node_lines.extend(str(int(i)) for i in g.features.argmax(axis=1))
        offset += g.node_count
    (root / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (root / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(g.label) for g in dataset.graphs) + "\n"
    )
    if onehot:
        (root / f"{name}_node_labels.txt").write_text("\n".join(node_lines) + "\n")
    return root


def write_manifest(dataset: GraphDataset, path) -> dict:
    manifest = dataset.manifest()
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def max_degree(dataset: GraphDataset) -> int:
    return max((int(g.degrees().max()) for g in dataset.graphs), default=0)


def degree_onehot_features(dataset: GraphDataset, max_degree: int) -> GraphDataset:
    """Replace empty node features by a one-hot encoding of the node degree.

    Degrees above ``max_degree`` fall into the last bucket.
    """
    if dataset.feature_dim != 0:
        raise ContractError("dataset already has node features")
    if max_degree < 1:
        raise ContractError("max_degree must be positive")
    graphs = []
    for g in dataset.graphs:
        feats = np.zeros((g.node_count, max_degree + 1))
        feats[np.arange(g.node_count), np.minimum(g.degrees(), max_degree)] = 1.0
        graphs.append(g.replace(features=feats))
    return GraphDataset(graphs, dataset.num_classes, max_degree + 1, dataset.name)


def make_folds(dataset: GraphDataset, k: int = 10, seed: int = 0) -> list[FoldSplit]:
    """Seeded shuffle followed by contiguous slicing into ``k`` test folds.

    Within a split the non-test graphs (in shuffled order) are divided into
    train and validation at an 8:1 ratio; validation takes the tail.
    """
    n = len(dataset)
    if k < 2:
        raise ContractError("k must be at least 2")
    if n == 0:
        raise ContractError("dataset is empty")
    if k > n:
        raise ContractError(f"k={k} exceeds the number of graphs ({n})")
    order = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(order, k)
    splits = []
    for i, test in enumerate(chunks):
        test_set = set(test.tolist())
        rest = [int(j) for j in order if j not in test_set]
        n_val = int(round(len(rest) / 9))
        n_train = len(rest) - n_val
        splits.append(
            FoldSplit(
                fold_index=i,
                train_indices=rest[:n_train],
                val_indices=rest[n_train:],
                test_indices=[int(j) for j in test],
            )
        )
    return splits


# --------------------------------------------------------------------------- #
# Structural augmenters
# --------------------------------------------------------------------------- #


def drop_edge(graph: Graph, p: float, rng: np.random.Generator) -> Graph:
    if not 0.0 <= p <= 1.0:
        raise ContractError("p must lie in [0, 1]")
    keep = rng.random(graph.edge_count) >= p
    return graph.replace(edges=graph.edges[keep])


def drop_node(graph: Graph, p: float, rng: np.random.Generator) -> Graph:
    """Remove each node independently with probability ``p``.

    At least one node always survives so the readout stays defined.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError("p must lie in [0, 1)")
    keep = rng.random(graph.node_count) >= p
    if not keep.any():
        keep[rng.integers(graph.node_count)] = True
    return induced_subgraph(graph, np.flatnonzero(keep))


def induced_subgraph(graph: Graph, nodes: np.ndarray) -> Graph:
    nodes = np.asarray(nodes, dtype=np.int64)
    remap = np.full(graph.node_count, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    e = remap[graph.edges] if graph.edge_count else graph.edges
    e = e[(e >= 0).all(axis=1)] if graph.edge_count else e
    return Graph(len(nodes), e, graph.features[nodes], graph.label)


@dataclass
class RewireResult:
    graph: Graph
    broken: int
    swapped: int
    discarded: int


def _place_by_swap(a, b, kept, rng, tries):
    # attach (a, b) by a double-edge swap with an existing edge (x, y):
    # remove x-y, add a-x and b-y; every degree is unchanged
    ordered = sorted(kept)
    for _ in range(tries):
        x, y = ordered[int(rng.integers(len(ordered)))]
        if rng.random() < 0.5:
            x, y = y, x
        e1, e2 = (min(a, x), max(a, x)), (min(b, y), max(b, y))
        if a == x or b == y or e1 == e2 or e1 in kept or e2 in kept:
            continue
        kept.remove((min(x, y), max(x, y)))
        kept.add(e1)
        kept.add(e2)
        return True
    return False


def configuration_rewire_stats(
    graph: Graph, r: float, rng: np.random.Generator, max_redraws: int = 50
) -> RewireResult:
    """Configuration-model rewiring that also reports collision handling.

    Each edge is broken into two stubs with probability ``r`` and the stubs are
    paired uniformly. A pair that would form a self-loop or a duplicate edge is
    redrawn up to ``max_redraws`` times, then attached through a double-edge
    swap. If that fails too the stub pair is discarded and, to keep the degree
    sequence intact, the input graph is returned unchanged.
    """
    if not 0.0 <= r <= 1.0:
        raise ContractError("r must lie in [0, 1]")
    broken_mask = rng.random(graph.edge_count) < r
    kept = {(int(u), int(v)) for u, v in graph.edges[~broken_mask]}
    stubs = graph.edges[broken_mask].ravel().tolist()
    stubs = [stubs[i] for i in rng.permutation(len(stubs))]
    swapped = discarded = 0
    while len(stubs) >= 2:
        a = stubs.pop()
        placed = False
        for _ in range(max_redraws):
            j = int(rng.integers(len(stubs)))
            b = stubs[j]
            pair = (min(a, b), max(a, b))
            if a != b and pair not in kept:
                kept.add(pair)
                placed = True
                break
        stubs[j] = stubs[-1]
        stubs.pop()
        if placed:
            continue
        if kept and _place_by_swap(a, b, kept, rng, max_redraws):
            swapped += 1
        else:
            discarded += 1
    broken = int(broken_mask.sum())
    if discarded:
        logger.debug("rewire discarded %d stub pair(s); graph left unchanged", discarded)
        return RewireResult(graph, broken, swapped, discarded)
    edges = np.array(sorted(kept), dtype=np.int64).reshape(-1, 2)
    return RewireResult(graph.replace(edges=edges), broken, swapped, 0)


def configuration_rewire(graph: Graph, r: float, rng: np.random.Generator) -> Graph:
    return configuration_rewire_stats(graph, r, rng).graph


@dataclass
class CorruptionRecord:
    removed: int
    added: int


def corrupt_graph(
    graph: Graph, budget: float, rng: np.random.Generator
) -> tuple[Graph, CorruptionRecord]:
    n_edits = int(math.floor(budget * graph.edge_count))
    edges = graph.edge_set()
    max_edges = graph.node_count * (graph.node_count - 1) // 2
    removed = added = 0
    for _ in range(n_edits):
        want_remove = rng.random() < 0.5
        can_remove = len(edges) > 0
        can_add = len(edges) < max_edges
        if want_remove and not can_remove:
            want_remove = False
        elif not want_remove and not can_add:
            want_remove = True
        if want_remove and can_remove:
            ordered = sorted(edges)
            edges.remove(ordered[int(rng.integers(len(ordered)))])
            removed += 1
        elif can_add:
            while True:
                u, v = (int(x) for x in rng.integers(graph.node_count, size=2))
                pair = (min(u, v), max(u, v))
                if u != v and pair not in edges:
                    edges.add(pair)
                    added += 1
                    break
    out = graph.replace(edges=np.array(sorted(edges), dtype=np.int64).reshape(-1, 2))
    return out, CorruptionRecord(removed, added)


def corrupt_structure(
    dataset: GraphDataset, budget: float, rng: np.random.Generator
) -> tuple[GraphDataset, list[CorruptionRecord]]:
    """Apply ``floor(budget * |E|)`` random edge removals/insertions to every graph.

    Each edit is a removal or an insertion with equal probability; when one kind
    is impossible (no edges, or a complete graph) the other is used.
    """
    if not 0.0 <= budget < 1.0:
        raise ContractError("budget must lie in [0, 1)")
    graphs, records = [], []
    for g in dataset.graphs:
        out, rec = corrupt_graph(g, budget, rng)
        graphs.append(out)
        records.append(rec)
    return dataset.with_graphs(graphs), records
