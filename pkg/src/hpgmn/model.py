"""The full model: per-block MLPs, memory attention, classifier, training.

Forward path: each enabled statistic block goes through its own MLP; the
concatenation Q queries the memory; the value readout V is concatenated
back onto Q and classified by the head MLP. The training objective adds
the nearest-unit (kpattern) and usage-entropy regularizers plus a
Frobenius penalty on the memory, all with analytic gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .graph import Graph, SplitSet
from .local_stats import BLOCK_ORDER, LocalStatistics
from .memory import (attend, attend_backward, entropy_loss,
                     frobenius_penalty, init_memory, kpattern_loss,
                     memory_diagnostics, read_values, read_values_backward)
from .nn import (Mlp, OptimizerState, TrainConfig, TrainingDiverged, accuracy,
                 cross_entropy_loss, load_checkpoint, optimizer_step,
                 save_checkpoint, softmax_rows)


@dataclass
class ModelConfig:
    n_memory_units: int = 100
    block_hidden: int = 64
    block_out: int = 64
    head_hidden: int = 64
    alpha_kpattern: float = 0.01
    beta_entropy: float = 0.01
    gamma_frobenius: float = 1e-4

    def __post_init__(self):
        for name in ("alpha_kpattern", "beta_entropy", "gamma_frobenius"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class RunMetrics:
    split_id: int
    seed: int
    epochs_run: int
    best_epoch: int
    train_loss: list
    train_acc: list
    val_loss: list
    val_acc: list
    loss_terms: dict
    test_acc: float
    memory: dict
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "split_id": self.split_id,
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_loss": self.val_loss,
            "val_acc": self.val_acc,
            "loss_terms": self.loss_terms,
            "test_acc": self.test_acc,
            "memory": self.memory,
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d


class HpGmnModel:
    """Block MLPs + memory + head, with a flat parameter vector view.

    Parameter order: block MLPs in canonical block order (each layer's
    weights then bias), then the head MLP, then the memory matrix unless
    it is frozen.
    """

    def __init__(self, block_widths: dict, num_classes: int, cfg: ModelConfig,
                 seed: int = 0, memory_frozen: bool = False, init_blocks=None):
        self.cfg = cfg
        self.num_classes = num_classes
        self.memory_frozen = memory_frozen
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x40DE1)))
        self.block_names = [n for n in BLOCK_ORDER if n in block_widths]
        if not self.block_names:
            raise ValueError("model needs at least one statistic block")
        self.blocks = {
            name: Mlp([block_widths[name], cfg.block_hidden, cfg.block_out], rng)
            for name in self.block_names
        }
        if init_blocks is not None:
            # fold the input means into the first-layer bias: the statistic
            # blocks are non-negative, and without centering a ReLU unit
            # whose weights point away from the data cone is born dead
            for name in self.block_names:
                mlp = self.blocks[name]
                mu = init_blocks[name].mean(axis=0)
                mlp.biases[0] = 0.01 - mu @ mlp.weights[0]
        self.query_width = cfg.block_out * len(self.block_names)
        self.head = Mlp([2 * self.query_width, cfg.head_hidden, num_classes], rng)
        self.bank = init_memory(cfg.n_memory_units, self.query_width, rng)
        if init_blocks is not None:
            # same centering for the head; its value-readout half is nearly
            # constant across nodes at init (attention starts near uniform)
            queries = np.concatenate(
                [self.blocks[n].forward(init_blocks[n])[0]
                 for n in self.block_names], axis=1)
            values = read_values(self.bank, attend(self.bank, queries))
            mu = np.concatenate([queries, values], axis=1).mean(axis=0)
            self.head.biases[0] = 0.01 - mu @ self.head.weights[0]

    # -- parameter vector view -------------------------------------------

    def param_vector(self) -> np.ndarray:
        parts = [self.blocks[n].flat_params() for n in self.block_names]
        parts.append(self.head.flat_params())
        if not self.memory_frozen:
            parts.append(self.bank.units.ravel())
        return np.concatenate(parts)

    def set_param_vector(self, vec: np.ndarray) -> None:
        off = 0
        for n in self.block_names:
            size = self.blocks[n].n_params
            self.blocks[n].set_flat(vec[off:off + size])
            off += size
        self.head.set_flat(vec[off:off + self.head.n_params])
        off += self.head.n_params
        if not self.memory_frozen:
            m = self.bank.units
            self.bank.units = vec[off:off + m.size].reshape(m.shape).copy()
            off += m.size
        if off != vec.size:
            raise ValueError("parameter vector length mismatch")

    def bias_mask(self) -> np.ndarray:
        parts = [self.blocks[n].bias_mask() for n in self.block_names]
        parts.append(self.head.bias_mask())
        if not self.memory_frozen:
            parts.append(np.zeros(self.bank.units.size, dtype=bool))
        return np.concatenate(parts)

    # -- forward / loss ----------------------------------------------------

    def forward(self, stats: LocalStatistics):
        """Returns (queries, attention, values, logits, caches)."""
        names = [n for n, _ in stats.enabled_blocks()]
        if names != self.block_names:
            raise ValueError(
                f"statistic blocks {names} do not match model blocks"
                f" {self.block_names}")
        outs, caches = [], {}
        for name in self.block_names:
            out, cache = self.blocks[name].forward(stats.blocks[name])
            outs.append(out)
            caches[name] = cache
        queries = np.concatenate(outs, axis=1)
        att = attend(self.bank, queries)
        values = read_values(self.bank, att)
        logits, head_cache = self.head.forward(
            np.concatenate([queries, values], axis=1))
        caches["head"] = head_cache
        return queries, att, values, logits, caches

    def predict_proba(self, stats: LocalStatistics) -> np.ndarray:
        return softmax_rows(self.forward(stats)[3])

    def total_loss(self, stats: LocalStatistics, labels: np.ndarray,
                   train_idx: np.ndarray):
        """Objective value, per-term breakdown, and the flat gradient.

        Classification loss runs over the train nodes only; both memory
        regularizers and the Frobenius penalty see every node.
        """
        total, terms, grad, _ = self._loss_grad_probs(stats, labels, train_idx)
        return total, terms, grad

    def _loss_grad_probs(self, stats, labels, train_idx):
        cfg = self.cfg
        queries, att, values, logits, caches = self.forward(stats)
        n_train = train_idx.size
        if n_train == 0:
            raise ValueError("train split is empty")
        probs = softmax_rows(logits)
        l_class = cross_entropy_loss(probs, labels, train_idx)
        l_kp, d_units_kp, d_queries_kp = kpattern_loss(self.bank, queries)
        l_ent, d_att_ent = entropy_loss(att)
        l_fro, d_units_fro = frobenius_penalty(self.bank)
        total = (l_class + cfg.alpha_kpattern * l_kp
                 + cfg.beta_entropy * l_ent + cfg.gamma_frobenius * l_fro)
        if not np.isfinite(total):
            raise TrainingDiverged("non-finite loss")
        terms = {"class": l_class, "kpattern": l_kp, "entropy": l_ent,
                 "frobenius": l_fro, "total": total}

        # classifier head
        d_logits = np.zeros_like(logits)
        d_logits[train_idx] = probs[train_idx]
        d_logits[train_idx, labels[train_idx]] -= 1.0
        d_logits /= n_train
        d_head_in, head_grads = self.head.backward(caches["head"], d_logits)
        h = self.query_width
        d_queries = d_head_in[:, :h].copy()
        d_values = d_head_in[:, h:]

        # memory readout and attention
        d_units, d_att = read_values_backward(self.bank, att, d_values)
        d_att += cfg.beta_entropy * d_att_ent
        d_units_att, d_queries_att = attend_backward(self.bank, queries, att, d_att)
        d_units += d_units_att
        d_queries += d_queries_att

        # regularizers
        d_units += cfg.alpha_kpattern * d_units_kp
        d_queries += cfg.alpha_kpattern * d_queries_kp
        d_units += cfg.gamma_frobenius * d_units_fro

        # statistic blocks
        grad_parts = []
        off = 0
        for name in self.block_names:
            w = self.cfg.block_out
            _, grads = self.blocks[name].backward(
                caches[name], d_queries[:, off:off + w])
            grad_parts.append(self.blocks[name].flat_grads(grads))
            off += w
        grad_parts.append(self.head.flat_grads(head_grads))
        if not self.memory_frozen:
            grad_parts.append(d_units.ravel())
        return total, terms, np.concatenate(grad_parts), probs

    def checkpoint_header(self) -> list:
        widths = []
        for n in self.block_names:
            widths.extend(self.blocks[n].widths)
            widths.append(-1)   # block separator
        widths.extend(self.head.widths)
        return [self.bank.n_units, self.bank.hidden,
                int(self.memory_frozen), *widths]


def evaluate(model: HpGmnModel, stats: LocalStatistics, labels, idx) -> float:
    """Argmax accuracy over the index list (ties to the lowest class id)."""
    return accuracy(model.predict_proba(stats), labels, idx)


def save_model(model: HpGmnModel, path) -> None:
    """Write parameters in the flat binary checkpoint format."""
    save_checkpoint(path, model.checkpoint_header(), model.param_vector())


def load_model_params(model: HpGmnModel, path) -> None:
    """Restore parameters into an architecturally identical model."""
    header, params = load_checkpoint(path)
    if header != model.checkpoint_header():
        raise ValueError(f"{path}: checkpoint architecture does not match")
    model.set_param_vector(params)


def train(model: HpGmnModel, g: Graph, stats: LocalStatistics, split: SplitSet,
          cfg: TrainConfig) -> RunMetrics:
    """Full-batch training with early stopping on validation accuracy.

    The parameters from the best-validation epoch are restored before the
    test evaluation, so the returned model never under-performs the
    recorded best epoch.
    """
    if split.val.size == 0:
        raise ValueError("training needs a non-empty validation set: early "
                         "stopping and checkpoint selection key on it")
    t0 = time.perf_counter()
    labels = g.labels
    params = model.param_vector()
    state = OptimizerState.zeros(params.size)
    bias_mask = model.bias_mask()

    hist = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": []}
    best_val, best_params, best_epoch, best_terms = -1.0, params.copy(), 0, {}
    since_best = 0
    epoch = 0
    for epoch in range(cfg.max_epochs):
        model.set_param_vector(params)
        try:
            loss, terms, grad, probs = model._loss_grad_probs(
                stats, labels, split.train)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"diverged at epoch {epoch}: {exc}") from exc
        tr_acc = accuracy(probs, labels, split.train)
        v_loss = cross_entropy_loss(probs, labels, split.val)
        v_acc = accuracy(probs, labels, split.val)
        hist["train_loss"].append(loss)
        hist["train_acc"].append(tr_acc)
        hist["val_loss"].append(v_loss)
        hist["val_acc"].append(v_acc)

        if v_acc > best_val:
            best_val, best_params, best_epoch = v_acc, params.copy(), epoch
            best_terms = terms
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        try:
            params, state = optimizer_step(state, params, grad, cfg, bias_mask)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"diverged at epoch {epoch}: {exc}") from exc

    model.set_param_vector(best_params)
    queries = model.forward(stats)[0]
    test_acc = evaluate(model, stats, labels, split.test)
    return RunMetrics(
        split_id=split.split_id,
        seed=cfg.seed,
        epochs_run=epoch + 1,
        best_epoch=best_epoch,
        train_loss=hist["train_loss"],
        train_acc=hist["train_acc"],
        val_loss=hist["val_loss"],
        val_acc=hist["val_acc"],
        loss_terms=best_terms,
        test_acc=test_acc,
        memory=memory_diagnostics(model.bank, queries),
        wall_clock=time.perf_counter() - t0,
    )
