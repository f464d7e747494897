"""Dense MLP substrate with hand-derived gradients, optimizer, grad checker.

Everything is float64 numpy. Gradients are written out analytically and
verified against central finite differences; there is no taped autodiff.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"HPGMNCKP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(Exception):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 500
    patience: int = 100
    weight_decay: float = 5e-4
    seed: int = 0
    optimizer: str = "adam"   # "adam" | "sgd"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def relu(x):
    return np.maximum(x, 0.0)


class Mlp:
    """Affine + ReLU stack; identity activation on the output layer.

    Weights use Kaiming-uniform init (bound sqrt(6/fan_in)). Hidden
    biases start at 0.01 so no ReLU unit is born dead on non-negative
    inputs (counts, diffusion rows); the output bias starts at zero.
    """

    def __init__(self, widths, rng=None):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(int(w) for w in widths)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        n_layers = len(self.widths) - 1
        for l, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.full(fan_out, 0.0 if l == n_layers - 1 else 0.01))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x):
        """Return (output, cache); cache holds pre-activations per layer."""
        if x.shape[1] != self.widths[0]:
            raise ValueError(
                f"input width {x.shape[1]} != MLP input width {self.widths[0]}")
        pre = []
        a = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append((a, z))
            a = z if l == self.n_layers - 1 else relu(z)
        return a, pre

    def backward(self, cache, d_out):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (d_input, [(dW, db), ...]) in layer order.
        """
        grads = [None] * self.n_layers
        dz = d_out
        for l in range(self.n_layers - 1, -1, -1):
            a_in, z = cache[l]
            if l != self.n_layers - 1:
                dz = dz * (z > 0)
            grads[l] = (a_in.T @ dz, dz.sum(axis=0))
            dz = dz @ self.weights[l].T
        return dz, grads

    def flat_params(self):
        return np.concatenate(
            [np.concatenate([w.ravel(), b])
             for w, b in zip(self.weights, self.biases)])

    def set_flat(self, vec):
        off = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = vec[off:off + w.size].reshape(w.shape).copy()
            off += w.size
            self.biases[l] = vec[off:off + b.size].copy()
            off += b.size
        if off != vec.size:
            raise ValueError("parameter vector length mismatch")

    def flat_grads(self, grads):
        return np.concatenate(
            [np.concatenate([dw.ravel(), db]) for dw, db in grads])

    def bias_mask(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(np.zeros(w.size, dtype=bool))
            parts.append(np.ones(b.size, dtype=bool))
        return np.concatenate(parts)


def mlp_forward(m: Mlp, x: np.ndarray) -> np.ndarray:
    """Plain forward pass, rows in -> rows out."""
    return m.forward(x)[0]


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(probs, targets, rows, diagnostics=None) -> float:
    """Mean negative log-likelihood of targets over the given rows.

    Probabilities at exactly 0 are clamped to 1e-12; if that happens and a
    diagnostics dict is supplied, 'clamped' is set.
    """
    rows = np.asarray(rows)
    p = probs[rows, np.asarray(targets)[rows]]
    if np.any(p <= 0):
        if diagnostics is not None:
            diagnostics["clamped"] = int(np.sum(p <= 0))
        p = np.maximum(p, 1e-12)
    return float(-np.log(p).mean())


def accuracy(probs, targets, rows) -> float:
    """Argmax accuracy; logit ties resolve to the lowest class id."""
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("accuracy over an empty index list is undefined")
    pred = probs[rows].argmax(axis=1)
    return float(np.mean(pred == np.asarray(targets)[rows]))


def grad_check(loss_fn, params, analytic_grad, eps=1e-6, n_coords=None,
               rng=None) -> float:
    """Max relative error of analytic_grad vs central finite differences.

    Checks every coordinate unless n_coords caps the sample. Relative
    error is |fd - an| / max(1e-8, |fd| + |an|).
    """
    params = np.asarray(params, dtype=np.float64)
    idx = np.arange(params.size)
    if n_coords is not None and n_coords < params.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = rng.choice(params.size, size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        p = params.copy()
        p[i] += eps
        up = loss_fn(p)
        p[i] -= 2 * eps
        down = loss_fn(p)
        fd = (up - down) / (2 * eps)
        an = analytic_grad[i]
        err = abs(fd - an) / max(1e-8, abs(fd) + abs(an))
        worst = max(worst, err)
    return worst


@dataclass
class OptimizerState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n_params: int) -> "OptimizerState":
        return cls(step=0, m=np.zeros(n_params), v=np.zeros(n_params))


def optimizer_step(state, params, grads, cfg: TrainConfig, bias_mask=None):
    """One Adam (default) or SGD update; returns (new_params, state).

    weight_decay enters the gradient as an L2 term on everything except
    the coordinates flagged by bias_mask.
    """
    if not np.all(np.isfinite(grads)):
        raise TrainingDiverged("non-finite gradient")
    g = grads
    if cfg.weight_decay:
        decay = cfg.weight_decay * params
        if bias_mask is not None:
            decay = np.where(bias_mask, 0.0, decay)
        g = g + decay
    if cfg.optimizer == "sgd":
        state.step += 1
        return params - cfg.learning_rate * g, state
    b1, b2, eps = 0.9, 0.999, 1e-8
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    return params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps), state


def save_checkpoint(path, header_ints, flat_params) -> None:
    """Versioned flat binary: magic, version, header ints, little-endian f64."""
    flat_params = np.ascontiguousarray(flat_params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_ints)))
        fh.write(struct.pack(f"<{len(header_ints)}q", *header_ints))
        fh.write(struct.pack("<q", flat_params.size))
        fh.write(flat_params.tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (header_ints, flat_params)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_hdr = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = list(struct.unpack(f"<{n_hdr}q", fh.read(8 * n_hdr)))
        (n_params,) = struct.unpack("<q", fh.read(8))
        params = np.frombuffer(fh.read(8 * n_params), dtype="<f8").copy()
    if params.size != n_params:
        raise ValueError(f"{path}: truncated checkpoint")
    return header, params
