"""Global pattern memory: attention readout and regularization losses.

The memory is a K x hidden matrix; each node's transformed local
statistics vector queries it with dot-product attention, normalized over
the K units (so the K x N attention matrix is column-stochastic). All
losses return analytic gradients alongside their values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MemoryBank:
    units: np.ndarray   # (K, hidden)

    @property
    def n_units(self) -> int:
        return self.units.shape[0]

    @property
    def hidden(self) -> int:
        return self.units.shape[1]


def init_memory(n_units, hidden, rng) -> MemoryBank:
    # uniform in +-1/sqrt(hidden), same scale the attention logits expect
    if n_units < 1:
        raise ValueError("memory needs at least one unit")
    bound = 1.0 / np.sqrt(hidden)
    return MemoryBank(units=rng.uniform(-bound, bound, size=(n_units, hidden)))


def softmax_cols(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def attend(bank: MemoryBank, queries: np.ndarray) -> np.ndarray:
    """Attention matrix S (K x N): softmax over units of M @ Q^T.

    Column j is node j's distribution over memory units.
    """
    if queries.shape[1] != bank.hidden:
        raise ValueError(
            f"query width {queries.shape[1]} != memory width {bank.hidden}")
    return softmax_cols(bank.units @ queries.T)


def attend_backward(bank, queries, att, d_att):
    """Chain d(loss)/dS back through the column softmax and the logits.

    Returns (dM, dQ).
    """
    # column-wise softmax jacobian: dL = s * (g - <s, g>)
    d_logits = att * (d_att - np.sum(att * d_att, axis=0, keepdims=True))
    d_units = d_logits @ queries
    d_queries = d_logits.T @ bank.units
    return d_units, d_queries


def read_values(bank: MemoryBank, att: np.ndarray) -> np.ndarray:
    """Value matrix V = S^T M: per-node convex combination of units."""
    return att.T @ bank.units


def read_values_backward(bank, att, d_values):
    """Returns (dM, dS) for V = S^T M."""
    return att @ d_values, bank.units @ d_values.T


def kpattern_loss(bank: MemoryBank, queries: np.ndarray):
    """Sum over nodes of the Euclidean distance to the nearest unit.

    Ties go to the lowest unit index; a node sitting exactly on a unit
    contributes zero gradient. Returns (loss, dM, dQ).
    """
    if queries.shape[1] != bank.hidden:
        raise ValueError("query width does not match memory width")
    # (N, K) pairwise distances
    diff = queries[:, None, :] - bank.units[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    nearest = dist.argmin(axis=1)
    d_min = dist[np.arange(queries.shape[0]), nearest]
    loss = float(d_min.sum())

    d_units = np.zeros_like(bank.units)
    d_queries = np.zeros_like(queries)
    nz = d_min > 0
    if np.any(nz):
        rows = np.flatnonzero(nz)
        unit = nearest[rows]
        g = (bank.units[unit] - queries[rows]) / d_min[rows, None]
        np.add.at(d_units, unit, g)
        d_queries[rows] = -g
    return loss, d_units, d_queries


def entropy_loss(att: np.ndarray):
    """Negative entropy of the normalized per-unit total attention mass.

    The per-unit importance s'_i sums column i's attention over all
    nodes; it is normalized to a distribution before the entropy so the
    loss lives in [-ln K, 0]. Returns (loss, dS).
    """
    usage = att.sum(axis=1)
    total = usage.sum()
    p = usage / total
    logs = np.log(np.maximum(p, 1e-300))
    loss = float(np.sum(p * np.where(p > 0, logs, 0.0)))
    # d/ds'_i of sum p ln p with p = s'/total
    d_usage = (logs - loss) / total
    d_att = np.broadcast_to(d_usage[:, None], att.shape).copy()
    return loss, d_att


def frobenius_penalty(bank: MemoryBank):
    """Squared Frobenius norm of the memory; gradient 2M."""
    return float(np.sum(bank.units ** 2)), 2.0 * bank.units


def memory_diagnostics(bank: MemoryBank, queries: np.ndarray) -> dict:
    """Usage summary for the ablation harness, JSON-serializable.

    Reports per-unit attention mass, the nearest-unit assignment
    histogram, and the entropy of normalized usage.
    """
    att = attend(bank, queries)
    usage = att.sum(axis=1)
    p = usage / usage.sum()
    ent = float(-np.sum(p * np.log(np.maximum(p, 1e-300))))
    diff = queries[:, None, :] - bank.units[None, :, :]
    nearest = np.sum(diff * diff, axis=2).argmin(axis=1)
    hist = np.bincount(nearest, minlength=bank.n_units)
    return {
        "unit_importance": [float(x) for x in usage],
        "assignment_hist": [int(x) for x in hist],
        "usage_entropy": ent,
    }
