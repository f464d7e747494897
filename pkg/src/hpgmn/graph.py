"""Immutable attributed-graph data model, TSV dataset IO, splits, homophily.

Graphs are undirected and unweighted. Edges are stored once as sorted
(u, v) pairs; a self-loop may appear once. All feature arithmetic is
float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class DatasetError(Exception):
    """Raised for malformed dataset directories, with file/line context."""


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    num_classes: int
    edges: np.ndarray      # (E, 2) int64, each row sorted, unique
    features: np.ndarray   # (N, F) float64
    labels: np.ndarray     # (N,) int64, -1 where unknown
    adj_lists: tuple = field(repr=False, default=())

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def label_known(self) -> np.ndarray:
        return self.labels >= 0

    def neighbors(self, v: int) -> np.ndarray:
        return self.adj_lists[v]

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adj_lists], dtype=np.int64)

    def adjacency(self) -> np.ndarray:
        """Dense binary adjacency matrix (small graphs only)."""
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            u, v = self.edges[:, 0], self.edges[:, 1]
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a


def make_graph(num_nodes, edges, features, labels, num_classes=None) -> Graph:
    """Validate and build an immutable Graph.

    Edges are deduplicated and canonicalized to sorted pairs. num_classes
    defaults to max(known label) + 1.
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    if features.shape[0] != num_nodes:
        raise DatasetError(
            f"feature matrix has {features.shape[0]} rows, expected {num_nodes}")
    if features.ndim != 2 or features.shape[1] < 1:
        raise DatasetError("feature matrix must be N x F with F >= 1")
    if not np.all(np.isfinite(features)):
        bad = int(np.argwhere(~np.isfinite(features).all(axis=1))[0, 0])
        raise DatasetError(f"non-finite feature value at node {bad}")
    if labels.shape != (num_nodes,):
        raise DatasetError(
            f"labels has {labels.shape[0]} entries, expected {num_nodes}")
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = int(np.argwhere((edges < 0) | (edges >= num_nodes))[0, 0])
        raise DatasetError(
            f"edge {bad}: endpoint out of range for {num_nodes} nodes")

    if np.any(labels < -1):
        bad = int(np.argwhere(labels < -1)[0, 0])
        raise DatasetError(f"label id out of range at node {bad}")
    known = labels >= 0
    if num_classes is None:
        num_classes = int(labels[known].max()) + 1 if known.any() else 1
    if known.any() and labels[known].max() >= num_classes:
        bad = int(np.argwhere(known & (labels >= num_classes))[0, 0])
        raise DatasetError(
            f"label id {labels[bad]} >= num_classes {num_classes} at node {bad}")

    if edges.size:
        edges = np.sort(edges, axis=1)
        edges = np.unique(edges, axis=0)

    adj = [[] for _ in range(num_nodes)]
    for u, v in edges:
        adj[u].append(v)
        if u != v:
            adj[v].append(u)
    adj_lists = tuple(np.array(sorted(a), dtype=np.int64) for a in adj)

    features.setflags(write=False)
    labels.setflags(write=False)
    edges.setflags(write=False)
    return Graph(num_nodes=int(num_nodes), num_classes=int(num_classes),
                 edges=edges, features=features, labels=labels,
                 adj_lists=adj_lists)


@dataclass(frozen=True)
class SplitSet:
    split_id: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, g: Graph, source: str = "split") -> None:
        parts = {"train": self.train, "val": self.val, "test": self.test}
        seen = np.concatenate([self.train, self.val, self.test])
        if seen.size != np.unique(seen).size:
            raise DatasetError(f"{source}: train/val/test sets overlap")
        for name, idx in parts.items():
            if idx.size and (idx.min() < 0 or idx.max() >= g.num_nodes):
                pos = int(np.argwhere((idx < 0) | (idx >= g.num_nodes))[0, 0])
                raise DatasetError(
                    f"{source}: {name}[{pos}]={idx[pos]} index out of range")
        if self.train.size == 0:
            raise DatasetError(f"{source}: empty train set")
        if not g.label_known[self.train].all():
            pos = int(np.argwhere(~g.label_known[self.train])[0, 0])
            raise DatasetError(
                f"{source}: train[{pos}]={self.train[pos]} has unknown label")


def _read_table(path: Path, what: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{path}: missing {what} file")
    try:
        frame = pd.read_csv(path, sep="\t", header=None, dtype=np.float64)
    except Exception as exc:  # pandas reports the offending line itself
        raise DatasetError(f"{path}: {exc}") from exc
    return frame.to_numpy()


def load_dataset(dir_path) -> tuple[Graph, list[SplitSet]]:
    """Load a dataset directory (edges.tsv / features.tsv / labels.tsv / splits/).

    Returns the graph plus all splits, ordered by split id. Malformed
    input raises DatasetError naming the file and line.
    """
    d = Path(dir_path)
    features = _read_table(d / "features.tsv", "features")
    n = features.shape[0]

    labels_raw = _read_table(d / "labels.tsv", "labels")
    if labels_raw.shape[1] != 1:
        raise DatasetError(f"{d / 'labels.tsv'}: expected one column")
    labels = labels_raw[:, 0]
    if not np.all(labels == np.round(labels)):
        line = int(np.argwhere(labels != np.round(labels))[0, 0]) + 1
        raise DatasetError(f"{d / 'labels.tsv'}:{line}: non-integer label")
    labels = labels.astype(np.int64)
    if labels.shape[0] != n:
        raise DatasetError(
            f"{d / 'labels.tsv'}: {labels.shape[0]} lines but features.tsv"
            f" has {n} rows")
    if np.any(labels < -1):
        line = int(np.argwhere(labels < -1)[0, 0]) + 1
        raise DatasetError(f"{d / 'labels.tsv'}:{line}: label id out of range")

    edges_path = d / "edges.tsv"
    if not edges_path.exists():
        raise DatasetError(f"{edges_path}: missing edges file")
    if edges_path.stat().st_size == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        raw = _read_table(edges_path, "edges")
        if raw.shape[1] != 2:
            raise DatasetError(f"{edges_path}: expected two columns")
        if not np.all(raw == np.round(raw)):
            line = int(np.argwhere((raw != np.round(raw)).any(axis=1))[0, 0]) + 1
            raise DatasetError(f"{edges_path}:{line}: non-integer endpoint")
        edges = raw.astype(np.int64)
        bad = (edges < 0) | (edges >= n)
        if bad.any():
            line = int(np.argwhere(bad.any(axis=1))[0, 0]) + 1
            raise DatasetError(
                f"{edges_path}:{line}: endpoint out of range (N={n})")

    g = make_graph(n, edges, features, labels)

    splits_dir = d / "splits"
    files = sorted(splits_dir.glob("split_*.json")) if splits_dir.is_dir() else []
    if not files:
        raise DatasetError(f"{splits_dir}: no split files found")
    splits = []
    for f in files:
        k = int(f.stem.split("_")[1])
        with open(f) as fh:
            payload = json.load(fh)
        try:
            s = SplitSet(
                split_id=k,
                train=np.asarray(payload["train"], dtype=np.int64),
                val=np.asarray(payload["val"], dtype=np.int64),
                test=np.asarray(payload["test"], dtype=np.int64),
            )
        except KeyError as exc:
            raise DatasetError(f"{f}: missing array {exc}") from exc
        s.validate(g, source=str(f))
        splits.append(s)
    splits.sort(key=lambda s: s.split_id)
    return g, splits


def save_dataset(g: Graph, splits, dir_path) -> None:
    """Write a dataset directory in the same TSV schema load_dataset reads."""
    d = Path(dir_path)
    (d / "splits").mkdir(parents=True, exist_ok=True)
    with open(d / "edges.tsv", "w") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    pd.DataFrame(g.features).to_csv(
        d / "features.tsv", sep="\t", header=False, index=False)
    with open(d / "labels.tsv", "w") as fh:
        for y in g.labels:
            fh.write(f"{y}\n")
    for s in splits:
        payload = {"train": s.train.tolist(), "val": s.val.tolist(),
                   "test": s.test.tolist()}
        with open(d / "splits" / f"split_{s.split_id}.json", "w") as fh:
            json.dump(payload, fh)


def node_homophily(g: Graph) -> float:
    """Mean over non-isolated nodes of the same-label neighbor fraction."""
    if not g.label_known.all():
        raise ValueError("node_homophily requires all labels known")
    fracs = []
    for v in range(g.num_nodes):
        nb = g.adj_lists[v]
        if nb.size == 0:
            continue
        fracs.append(np.mean(g.labels[nb] == g.labels[v]))
    if not fracs:
        raise ValueError("undefined homophily: graph has no edges")
    return float(np.mean(fracs))


def edge_homophily(g: Graph) -> float:
    """Fraction of (deduplicated, undirected) edges joining same-label nodes."""
    if not g.label_known.all():
        raise ValueError("edge_homophily requires all labels known")
    if g.num_edges == 0:
        raise ValueError("undefined homophily: graph has no edges")
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    return float(np.mean(same))


def generate_heterophilous_sbm(n_per_class, num_classes, p_intra, p_inter,
                               feature_shift, seed) -> Graph:
    """Stochastic-block-model graph with class-conditioned Gaussian features.

    Class c gets features N(feature_shift * e_c, I) in num_classes
    dimensions. p_inter > p_intra yields a heterophilous graph. Pure
    function of its arguments.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    for name, p in (("p_intra", p_intra), ("p_inter", p_inter)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    probs = np.where(same, p_intra, p_inter)
    keep = rng.random(iu.size) < probs
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    features = rng.standard_normal((n, num_classes))
    features[np.arange(n), labels] += feature_shift

    return make_graph(n, edges, features, labels, num_classes=num_classes)


def random_splits(g: Graph, n_splits=10, fractions=(0.48, 0.32, 0.20),
                  seed=0) -> list[SplitSet]:
    """Ten (by default) random 48/32/20 train/val/test splits, seeded."""
    f_train, f_val, _ = fractions
    labeled = np.flatnonzero(g.label_known)
    splits = []
    for k in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence((seed, k)))
        perm = labeled[rng.permutation(labeled.size)]
        n_train = int(round(f_train * perm.size))
        n_val = int(round(f_val * perm.size))
        s = SplitSet(split_id=k,
                     train=np.sort(perm[:n_train]),
                     val=np.sort(perm[n_train:n_train + n_val]),
                     test=np.sort(perm[n_train + n_val:]))
        s.validate(g, source=f"random split {k}")
        splits.append(s)
    return splits
