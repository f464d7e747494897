"""Per-node local statistics and the query inputs assembled from them.

Four blocks: raw attributes, label-wise neighbor class counts, label-wise
neighbor feature means, and truncated personalized-PageRank diffusion
rows. Neighbor statistics are guided by pseudo-labels from an
attribute-only MLP estimator; train-split nodes keep their true labels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, SplitSet
from .nn import (Mlp, OptimizerState, TrainConfig, TrainingDiverged,
                 cross_entropy_loss, optimizer_step, softmax_rows)

CACHE_VERSION = 2

BLOCK_ORDER = ("attributes", "class_dist", "feature_dist", "diffusion")

DEFAULT_ALPHA_PPR = 0.15
DEFAULT_K_MAX = 32


@dataclass(frozen=True)
class StatMasks:
    attributes: bool = True
    class_dist: bool = True
    feature_dist: bool = True
    diffusion: bool = True

    def enabled(self):
        return tuple(n for n in BLOCK_ORDER if getattr(self, n))


@dataclass(frozen=True)
class PseudoLabels:
    labels: np.ndarray           # (N,) in [0, C)
    source: str                  # "ground_truth_on_train" | "estimated"


@dataclass(frozen=True)
class LocalStatistics:
    masks: StatMasks
    blocks: dict = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return next(iter(self.blocks.values())).shape[0]

    def enabled_blocks(self):
        """(name, matrix) pairs in canonical block order."""
        return [(n, self.blocks[n]) for n in self.masks.enabled()]

    def widths(self):
        return {n: m.shape[1] for n, m in self.enabled_blocks()}


def fit_pseudo_label_estimator(g: Graph, split: SplitSet, cfg: TrainConfig,
                               hidden: int = 512) -> PseudoLabels:
    """Attribute-only two-layer MLP classifier, argmax over all nodes.

    Trained with cross-entropy on the train split; validation accuracy
    drives early stopping. Train nodes are overwritten with ground truth.
    """
    if split.train.size == 0:
        raise ValueError("train split is empty")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE57)))
    mlp = Mlp([g.num_features, hidden, g.num_classes], rng)
    # center initial preactivations; attribute vectors are non-negative
    mlp.biases[0] = 0.01 - g.features[split.train].mean(axis=0) @ mlp.weights[0]
    params = mlp.flat_params()
    bias_mask = mlp.bias_mask()
    state = OptimizerState.zeros(params.size)
    x_train = g.features[split.train]
    y = g.labels

    best_val, best_params, since_best = -1.0, params.copy(), 0
    for epoch in range(cfg.max_epochs):
        mlp.set_flat(params)
        out, cache = mlp.forward(x_train)
        probs = softmax_rows(out)
        loss = cross_entropy_loss(probs, y[split.train], np.arange(split.train.size))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"estimator diverged at epoch {epoch}")
        d_out = probs.copy()
        d_out[np.arange(split.train.size), y[split.train]] -= 1.0
        d_out /= split.train.size
        _, grads = mlp.backward(cache, d_out)

        if split.val.size:
            val_probs = softmax_rows(mlp.forward(g.features[split.val])[0])
            val_acc = float(np.mean(val_probs.argmax(axis=1) == y[split.val]))
        else:
            val_acc = -loss
        if val_acc > best_val:
            best_val, best_params, since_best = val_acc, params.copy(), 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        params, state = optimizer_step(state, params, mlp.flat_grads(grads),
                                       cfg, bias_mask)

    mlp.set_flat(best_params)
    pred = mlp.forward(g.features)[0].argmax(axis=1)
    pred[split.train] = y[split.train]
    pred.setflags(write=False)
    return PseudoLabels(labels=pred, source="ground_truth_on_train")


def label_wise_class_distribution(g: Graph, pl: PseudoLabels) -> np.ndarray:
    """(N, C) counts of neighbors per pseudo-class; row sums are degrees."""
    r2 = np.zeros((g.num_nodes, g.num_classes))
    for v in range(g.num_nodes):
        nb = g.adj_lists[v]
        if nb.size:
            r2[v] = np.bincount(pl.labels[nb], minlength=g.num_classes)
    return r2


def label_wise_feature_distribution(g: Graph, pl: PseudoLabels) -> np.ndarray:
    """(N, C*F) per-class neighbor feature means, zero where no neighbor.

    Block c of row v averages the attributes of v's neighbors carrying
    pseudo-label c.
    """
    n, f, c = g.num_nodes, g.num_features, g.num_classes
    r3 = np.zeros((n, c * f))
    for v in range(n):
        nb = g.adj_lists[v]
        if not nb.size:
            continue
        nb_labels = pl.labels[nb]
        for cls in np.unique(nb_labels):
            members = nb[nb_labels == cls]
            r3[v, cls * f:(cls + 1) * f] = g.features[members].mean(axis=0)
    return r3


def ppr_diffusion(g: Graph, alpha_ppr: float = DEFAULT_ALPHA_PPR,
                  k_max: int = DEFAULT_K_MAX) -> np.ndarray:
    """Truncated PPR diffusion sum_{k<=k_max} a(1-a)^k T^k as a dense N x N.

    T is the column-stochastic transition matrix of the self-loop-
    augmented adjacency, so every column of the result sums to exactly
    1 - (1-a)^(k_max+1).
    """
    if not 0.0 < alpha_ppr < 1.0:
        raise ValueError("alpha_ppr must lie strictly inside (0, 1)")
    if k_max < 0:
        raise ValueError("k_max must be non-negative")
    n = g.num_nodes
    if g.num_edges:
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
        a = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        a = (a.tocsr() + sp.eye(n, format="csr")).tocsr()
        a.data[:] = 1.0   # re-binarize: self-loop augmentation is idempotent
    else:
        a = sp.eye(n, format="csr")
    deg = np.asarray(a.sum(axis=0)).ravel()
    t = a @ sp.diags(1.0 / deg)

    diffusion = alpha_ppr * np.eye(n)
    power = np.eye(n)
    for k in range(1, k_max + 1):
        power = t @ power
        diffusion += alpha_ppr * (1.0 - alpha_ppr) ** k * power
    return diffusion


def assemble_local_statistics(g: Graph, pl: PseudoLabels | None = None,
                              diffusion: np.ndarray | None = None,
                              masks: StatMasks = StatMasks()) -> LocalStatistics:
    """Bundle the enabled blocks; disabled blocks are simply absent."""
    if not masks.enabled():
        raise ValueError("no local statistic enabled")
    blocks = {}
    if masks.attributes:
        blocks["attributes"] = g.features
    if masks.class_dist or masks.feature_dist:
        if pl is None:
            raise ValueError("label-wise statistics need pseudo-labels")
        if masks.class_dist:
            blocks["class_dist"] = label_wise_class_distribution(g, pl)
        if masks.feature_dist:
            blocks["feature_dist"] = label_wise_feature_distribution(g, pl)
    if masks.diffusion:
        if diffusion is None:
            raise ValueError("diffusion block enabled but no matrix given")
        if diffusion.shape[0] != g.num_nodes:
            raise ValueError("diffusion matrix does not match the graph")
        blocks["diffusion"] = diffusion
    rows = {m.shape[0] for m in blocks.values()}
    if len(rows) != 1:
        raise ValueError(f"block row counts disagree: {sorted(rows)}")
    return LocalStatistics(masks=masks, blocks=blocks)


# -- binary cache ---------------------------------------------------------

def dataset_fingerprint(dir_path) -> str:
    """sha256 over the dataset TSV files, hex-encoded."""
    d = Path(dir_path)
    h = hashlib.sha256()
    for name in ("edges.tsv", "features.tsv", "labels.tsv"):
        with open(d / name, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def cache_key(dataset_hash, split_id, alpha_ppr, k_max, estimator_seed) -> str:
    raw = f"{CACHE_VERSION}|{dataset_hash}|{split_id}|{alpha_ppr!r}|{k_max}|{estimator_seed}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def save_statistics_cache(path, stats: LocalStatistics) -> None:
    arrays = {f"block_{n}": m for n, m in stats.blocks.items()}
    arrays["mask_names"] = np.array(stats.masks.enabled())
    arrays["cache_version"] = np.array(CACHE_VERSION)
    np.savez_compressed(path, **arrays)


def load_statistics_cache(path) -> LocalStatistics | None:
    """Returns None when the blob is missing or from another version."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as z:
        if int(z["cache_version"]) != CACHE_VERSION:
            return None
        names = [str(s) for s in z["mask_names"]]
        blocks = {n: z[f"block_{n}"] for n in names}
    masks = StatMasks(**{n: n in names for n in BLOCK_ORDER})
    return LocalStatistics(masks=masks, blocks=blocks)
