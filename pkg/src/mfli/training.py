"""Joint training of the multifaceted embedding table and the codebook.

The objective per pair is a weighted sampled-softmax term on the raw
embeddings, one such term per active codebook layer on the partially
reconstructed candidate, a relevance term on the second facet, and a
codeword-utilization penalty. All gradients are analytic; updates use
Adagrad and touch only rows and codewords involved in the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CodebookConfig, TrainingConfig
from .container import KIND_CHECKPOINT, read_container, write_container
from .corpus import Item, EngagementEvent
from .errors import ConfigError, ConsistencyError, NumericError
from .quantizer import (
    Codebook,
    DelayedStartSchedule,
    assign_batch,
    codebook_from_bytes,
    codebook_reg_grad,
    codebook_reg_loss,
    codebook_to_bytes,
    init_codebook,
    is_layer_active,
)
from .rng import CODEBOOK_STREAM, INIT_STREAM, TRAIN_STREAM, cold_start_embedding, spawn_rng


@dataclass
class ItemEmbeddingTable:
    """Dense (I, F, d) embedding store with id -> row lookup."""

    ids: np.ndarray       # (I,) int64
    values: np.ndarray    # (I, F, d) float32
    row_of: dict[int, int]

    @classmethod
    def initialize(cls, ids: np.ndarray, num_facets: int, dim: int, seed: int
                   ) -> "ItemEmbeddingTable":
        """Uniform init in [-1/sqrt(d), +1/sqrt(d)]; keeps initial logits O(1)."""
        ids = np.asarray(ids, dtype=np.int64)
        rng = spawn_rng(seed, INIT_STREAM)
        bound = 1.0 / np.sqrt(dim)
        values = rng.uniform(-bound, bound, size=(len(ids), num_facets, dim))
        return cls(ids, values.astype(np.float32), {int(i): r for r, i in enumerate(ids)})

    @property
    def num_facets(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TrainBatch:
    trigger_rows: np.ndarray    # (B,)
    candidate_rows: np.ndarray  # (B,)
    labels: np.ndarray          # (B, F) float32
    negative_rows: np.ndarray   # (K,) shared across the batch

    def __post_init__(self) -> None:
        if len(self.trigger_rows) != len(self.candidate_rows):
            raise ConfigError("trigger/candidate row counts differ")
        if len(self.labels) != len(self.trigger_rows):
            raise ConfigError("labels row count differs from pairs")
        if len(self.trigger_rows) and np.isin(self.negative_rows, self.candidate_rows).any():
            raise ConfigError("negatives must be disjoint from batch candidates")

    def __len__(self) -> int:
        return len(self.trigger_rows)


@dataclass
class LossWeights:
    w0: float
    w_layers: list[float]
    aux_weight: float

    def __post_init__(self) -> None:
        if self.w0 < 0 or self.aux_weight < 0 or any(w < 0 for w in self.w_layers):
            raise ConfigError("loss weights must be >= 0")


@dataclass
class AdagradState:
    """Per-parameter squared-gradient accumulators plus the step counter."""

    learning_rate: float
    eps: float
    table_acc: np.ndarray
    codebook_acc: list[np.ndarray] | None = None
    step: int = 0

    @classmethod
    def for_table(cls, table: ItemEmbeddingTable, learning_rate: float,
                  eps: float = 1e-8) -> "AdagradState":
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        return cls(learning_rate, eps, np.zeros_like(table.values))

    def ensure_codebook(self, codebook: Codebook) -> None:
        if self.codebook_acc is None:
            self.codebook_acc = [np.zeros_like(layer) for layer in codebook.layers]

    def update_table_rows(self, table: ItemEmbeddingTable, rows: np.ndarray,
                          grads: np.ndarray) -> None:
        """Adagrad update after scatter-summing duplicate rows."""
        if len(rows) == 0:
            return
        unique, inverse = np.unique(rows, return_inverse=True)
        summed = np.zeros((len(unique),) + table.values.shape[1:], dtype=np.float64)
        np.add.at(summed, inverse, grads)
        if not np.all(np.isfinite(summed)):
            raise NumericError("non-finite gradient for embedding rows")
        acc = self.table_acc[unique].astype(np.float64) + summed ** 2
        self.table_acc[unique] = acc.astype(np.float32)
        delta = self.learning_rate * summed / (np.sqrt(acc) + self.eps)
        table.values[unique] -= delta.astype(np.float32)

    def update_codebook_layer(self, codebook: Codebook, layer: int,
                              grad: np.ndarray) -> None:
        """Zero-gradient codewords stay untouched (update locality)."""
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for codebook layer {layer + 1}")
        self.ensure_codebook(codebook)
        acc = self.codebook_acc[layer].astype(np.float64) + grad ** 2
        self.codebook_acc[layer] = acc.astype(np.float32)
        delta = self.learning_rate * grad / (np.sqrt(acc) + self.eps)
        codebook.layers[layer] -= delta.astype(np.float32)


def _as_negatives(negatives) -> np.ndarray:
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.ndim == 2:
        negs = negs[:, None, :]
    if negs.ndim != 3 or negs.shape[0] == 0:
        raise ConfigError("negatives must be a non-empty list of F x d embeddings")
    return negs


def _ssm_core(vi: np.ndarray, vj: np.ndarray, negs: np.ndarray, w: np.ndarray
              ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Batched loss and gradients, mean over the batch dimension.

    vi, vj: (B, F, d); negs: (K, F, d) shared; w: (B, F).
    Returns (loss, g_vi, g_vj, g_negs) with g_negs shaped (K, F, d).
    """
    batch = vi.shape[0]
    pos = np.einsum("bfd,bfd->bf", vi, vj)
    neg = np.einsum("bfd,kfd->bfk", vi, negs)
    logits = np.concatenate([pos[:, :, None], neg], axis=2)  # (B, F, 1+K)
    peak = logits.max(axis=2, keepdims=True)
    lse = peak[:, :, 0] + np.log(np.exp(logits - peak).sum(axis=2))
    loss = float((w * (lse - pos)).sum() / batch)
    prob = np.exp(logits - lse[:, :, None])
    coeff0 = w * (prob[:, :, 0] - 1.0) / batch           # (B, F)
    coeffk = w[:, :, None] * prob[:, :, 1:] / batch      # (B, F, K)
    g_vj = coeff0[:, :, None] * vi
    g_vi = coeff0[:, :, None] * vj + np.einsum("bfk,kfd->bfd", coeffk, negs)
    g_negs = np.einsum("bfk,bfd->kfd", coeffk, vi)
    return loss, g_vi, g_vj, g_negs


def _check_inputs(v_i, v_j, negs, w) -> tuple[np.ndarray, ...]:
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    negs = _as_negatives(negs)
    w = np.asarray(w, dtype=np.float64)
    if v_i.ndim == 1:
        v_i = v_i[None, :]
    if v_j.ndim == 1:
        v_j = v_j[None, :]
    if v_i.shape != v_j.shape or negs.shape[1:] != v_i.shape:
        raise ConfigError("embedding shapes disagree")
    if w.shape != (v_i.shape[0],):
        raise ConfigError("weight vector length must equal facet count")
    for name, arr in (("v_i", v_i), ("v_j", v_j), ("negatives", negs), ("w", w)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")
    return v_i, v_j, negs, w


def ssm_loss(v_i, v_j, negatives, w) -> float:
    """Weighted sampled-softmax loss over one positive pair; >= 0 for w >= 0."""
    v_i, v_j, negs, w = _check_inputs(v_i, v_j, negatives, w)
    loss, _, _, _ = _ssm_core(v_i[None], v_j[None], negs, w[None])
    return loss


def ssm_grad(v_i, v_j, negatives, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of ssm_loss w.r.t. (v_i, v_j, each negative)."""
    v_i, v_j, negs, w = _check_inputs(v_i, v_j, negatives, w)
    _, g_vi, g_vj, g_negs = _ssm_core(v_i[None], v_j[None], negs, w[None])
    return g_vi[0], g_vj[0], g_negs


def joint_loss(v_i, v_j, quantized_candidates, negatives, w,
               weights: LossWeights, aux: float) -> float:
    if len(quantized_candidates) != len(weights.w_layers):
        raise ConfigError(
            f"{len(quantized_candidates)} quantized candidates for "
            f"{len(weights.w_layers)} layer weights"
        )
    total = weights.w0 * ssm_loss(v_i, v_j, negatives, w)
    for w_l, v_hat in zip(weights.w_layers, quantized_candidates):
        if w_l != 0.0:
            total += w_l * ssm_loss(v_i, v_hat, negatives, w)
    return total + aux


def relevance_aux_loss(v_i, v_j, negatives, facet: int, label: float = 1.0) -> float:
    """Single-facet loss gated by that facet's co-engagement label."""
    v_i = np.asarray(v_i, dtype=np.float64)
    if v_i.ndim == 1:
        v_i = v_i[None, :]
    if not 0 <= facet < v_i.shape[0]:
        raise ConfigError(f"facet {facet} out of range")
    w = np.zeros(v_i.shape[0])
    w[facet] = label
    return ssm_loss(v_i, v_j, negatives, w)


@dataclass
class TrainStepStats:
    total: float = 0.0
    raw: float = 0.0
    quantized: list[float] = field(default_factory=list)
    aux: float = 0.0
    reg: float = 0.0


def _quantize_chain(candidates32: np.ndarray, codebook: Codebook
                    ) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Residual chain for a batch: indices, per-layer reconstructions, and
    the residual entering each layer.
    """
    batch = candidates32.shape[0]
    num_layers = codebook.num_layers
    indices = np.empty((batch, num_layers, codebook.num_facets), dtype=np.int64)
    residual = candidates32.astype(np.float32).copy()
    recon = np.zeros_like(residual)
    recons: list[np.ndarray] = []
    res_in: list[np.ndarray] = []
    for l, layer in enumerate(codebook.layers):
        res_in.append(residual.copy())
        for f in range(codebook.num_facets):
            idx = assign_batch(residual[:, f, :], layer[f])
            indices[:, l, f] = idx
            chosen = layer[f][idx]
            residual[:, f, :] -= chosen
            recon[:, f, :] += chosen
        recons.append(recon.copy())
    return indices, recons, res_in


def train_step(batch: TrainBatch, table: ItemEmbeddingTable,
               codebook: Codebook | None, weights: LossWeights,
               optimizer: AdagradState, schedule: DelayedStartSchedule,
               reg_weight: float = 0.0) -> TrainStepStats:
    """One optimizer step; mutates table/codebook/optimizer in place.

    The quantized terms treat codeword assignments as constants: their
    candidate-side gradient flows unchanged into the candidate row and into
    the codewords selected for it this batch. Inactive layers contribute
    nothing and their codewords stay untouched.
    """
    stats = TrainStepStats()
    if len(batch) == 0:
        return stats
    step = optimizer.step
    num_layers = codebook.num_layers if codebook is not None else 0
    if num_layers and len(weights.w_layers) != num_layers:
        raise ConfigError("w_layers length differs from codebook depth")

    vi = table.values[batch.trigger_rows].astype(np.float64)
    vj = table.values[batch.candidate_rows].astype(np.float64)
    negs = table.values[batch.negative_rows].astype(np.float64)
    labels = batch.labels.astype(np.float64)

    raw_loss, g_vi, g_vj, g_negs = _ssm_core(vi, vj, negs, labels)
    g_vi = weights.w0 * g_vi
    g_vj = weights.w0 * g_vj
    g_negs = weights.w0 * g_negs
    stats.raw = weights.w0 * raw_loss
    stats.total = stats.raw

    active = [
        l for l in range(num_layers)
        if len(schedule.per_layer_activation) > l and is_layer_active(schedule, l + 1, step)
    ]
    codebook_grads: dict[int, np.ndarray] = {}
    if active:
        indices, recons, res_in = _quantize_chain(
            table.values[batch.candidate_rows], codebook
        )
        for l in active:
            w_l = weights.w_layers[l]
            if w_l != 0.0:
                q_loss, q_gvi, q_gvhat, q_gnegs = _ssm_core(
                    vi, recons[l].astype(np.float64), negs, labels
                )
                stats.quantized.append(w_l * q_loss)
                stats.total += w_l * q_loss
                g_vi += w_l * q_gvi
                g_negs += w_l * q_gnegs
                g_vj += w_l * q_gvhat  # assignments frozen: identity into v_j
                for k in range(l + 1):
                    grad = codebook_grads.setdefault(
                        k, np.zeros(codebook.layers[k].shape, dtype=np.float64)
                    )
                    for f in range(codebook.num_facets):
                        np.add.at(grad[f], indices[:, k, f], w_l * q_gvhat[:, f, :])
            else:
                stats.quantized.append(0.0)
            if reg_weight > 0.0:
                layer_res = np.transpose(res_in[l], (1, 0, 2))  # (F, B, d)
                reg_l = codebook_reg_loss(codebook.layers[l], layer_res)
                stats.reg += reg_weight * reg_l
                stats.total += reg_weight * reg_l
                full = reg_weight * codebook_reg_grad(codebook.layers[l], layer_res)
                # restrict to codewords this batch selected (update locality)
                mask = np.zeros(codebook.layers[l].shape[:2], dtype=bool)
                for f in range(codebook.num_facets):
                    mask[f, np.unique(indices[:, l, f])] = True
                grad = codebook_grads.setdefault(
                    l, np.zeros(codebook.layers[l].shape, dtype=np.float64)
                )
                grad += full * mask[:, :, None]

    if weights.aux_weight > 0.0 and table.num_facets >= 2:
        w_aux = np.zeros_like(labels)
        w_aux[:, 1] = labels[:, 1]
        aux_loss, a_gvi, a_gvj, a_gnegs = _ssm_core(vi, vj, negs, w_aux)
        stats.aux = weights.aux_weight * aux_loss
        stats.total += stats.aux
        g_vi += weights.aux_weight * a_gvi
        g_vj += weights.aux_weight * a_gvj
        g_negs += weights.aux_weight * a_gnegs

    rows = np.concatenate([batch.trigger_rows, batch.candidate_rows, batch.negative_rows])
    grads = np.concatenate([g_vi, g_vj, g_negs])
    optimizer.update_table_rows(table, rows, grads)
    for l, grad in codebook_grads.items():
        optimizer.update_codebook_layer(codebook, l, grad)
    optimizer.step += 1
    return stats


def sample_negatives(rng: np.random.Generator, pool_size: int, count: int,
                     excluded_rows: np.ndarray) -> np.ndarray:
    """Uniform negative rows, redrawn until disjoint from the candidates."""
    if count <= 0:
        raise ConfigError("need at least one negative")
    if pool_size - len(np.unique(excluded_rows)) < 1:
        raise ConfigError("pool too small to draw negatives disjoint from candidates")
    negs = rng.integers(0, pool_size, size=count)
    bad = np.isin(negs, excluded_rows)
    while bad.any():
        negs[bad] = rng.integers(0, pool_size, size=int(bad.sum()))
        bad = np.isin(negs, excluded_rows)
    return negs


@dataclass
class TrainerCheckpoint:
    table: ItemEmbeddingTable
    codebook: Codebook | None
    optimizer: AdagradState
    schedule: DelayedStartSchedule
    loss_weights: LossWeights
    reg_weight: float
    layer_sizes: tuple[int, ...]
    init_seed: int
    layer_initialized: list[bool]

    @property
    def step(self) -> int:
        return self.optimizer.step

    def embedding_for(self, item_id: int) -> np.ndarray:
        """Table row when known, else the deterministic cold-start embedding."""
        row = self.table.row_of.get(int(item_id))
        if row is not None:
            return self.table.values[row]
        return cold_start_embedding(
            self.init_seed, item_id, self.table.num_facets, self.table.dim
        )

    def embeddings_for(self, item_ids) -> np.ndarray:
        """embedding_for over many ids; known rows take a vectorized gather."""
        ids = np.asarray(list(item_ids), dtype=np.int64)
        out = np.empty((len(ids), self.table.num_facets, self.table.dim), dtype=np.float32)
        rows = np.fromiter(
            (self.table.row_of.get(int(i), -1) for i in ids),
            dtype=np.int64, count=len(ids),
        )
        known = rows >= 0
        out[known] = self.table.values[rows[known]]
        for pos in np.nonzero(~known)[0]:
            out[pos] = cold_start_embedding(
                self.init_seed, int(ids[pos]), self.table.num_facets, self.table.dim
            )
        return out


def _reinit_layer(codebook: Codebook, layer: int, sample: np.ndarray,
                  rng: np.random.Generator) -> None:
    """Refresh one layer's codewords from the current residual distribution."""
    residual = sample.astype(np.float32).copy()
    for l in range(layer):
        for f in range(codebook.num_facets):
            idx = assign_batch(residual[:, f, :], codebook.layers[l][f])
            residual[:, f, :] -= codebook.layers[l][f][idx]
    n = codebook.layers[layer].shape[1]
    if sample.shape[0] < n:
        raise ConfigError("sample too small to reinitialize layer")
    for f in range(codebook.num_facets):
        rows = rng.choice(sample.shape[0], size=n, replace=False)
        codebook.layers[layer][f] = residual[rows, f, :]


def _codebook_sample(table: ItemEmbeddingTable, rng: np.random.Generator,
                     layer_sizes: tuple[int, ...]) -> np.ndarray:
    need = max(layer_sizes)
    size = min(len(table), max(4 * need, 2048))
    if size < need:
        raise ConfigError(f"pool of {len(table)} items cannot seed {need} codewords")
    rows = rng.choice(len(table), size=size, replace=False)
    return table.values[rows]


def train(items: list[Item], train_events: list[EngagementEvent],
          training: TrainingConfig, codebook_cfg: CodebookConfig, seed: int,
          log_every: int = 0) -> tuple[TrainerCheckpoint, list[float]]:
    """Full training loop; returns the checkpoint and the per-step loss trace."""
    training.validate()
    codebook_cfg.validate()
    if not items:
        raise ConfigError("empty corpus")
    layer_sizes = codebook_cfg.resolved_sizes()
    num_layers = len(layer_sizes)
    ids = np.array([it.item_id for it in items], dtype=np.int64)
    table = ItemEmbeddingTable.initialize(ids, training.num_facets, training.dim, seed)
    optimizer = AdagradState.for_table(table, training.learning_rate, training.adagrad_eps)
    schedule = DelayedStartSchedule(
        training.warmup_steps, training.resolved_activation(num_layers)
    )
    weights = LossWeights(
        training.w0, training.resolved_w_layers(num_layers), training.aux_weight
    )

    triggers = np.array([table.row_of[e.trigger_id] for e in train_events], dtype=np.int64)
    candidates = np.array([table.row_of[e.candidate_id] for e in train_events], dtype=np.int64)
    labels = np.array([e.labels for e in train_events], dtype=np.float32)
    if labels.size and labels.shape[1] != training.num_facets:
        raise ConfigError(
            f"events carry {labels.shape[1]} labels but training.num_facets is "
            f"{training.num_facets}"
        )

    rng = spawn_rng(seed, TRAIN_STREAM)
    cb_rng = spawn_rng(seed, CODEBOOK_STREAM)
    codebook: Codebook | None = None
    layer_ready = [False] * num_layers
    history: list[float] = []

    num_events = len(train_events)
    for _ in range(training.epochs):
        if num_events == 0:
            break
        order = rng.permutation(num_events)
        for start in range(0, num_events, training.batch_size):
            step = optimizer.step
            for l in range(num_layers):
                if not layer_ready[l] and step >= schedule.per_layer_activation[l]:
                    sample = _codebook_sample(table, cb_rng, layer_sizes)
                    if codebook is None:
                        codebook = init_codebook(sample, layer_sizes, cb_rng)
                    else:
                        _reinit_layer(codebook, l, sample, cb_rng)
                    optimizer.ensure_codebook(codebook)
                    layer_ready[l] = True
            rows = order[start : start + training.batch_size]
            cand = candidates[rows]
            negs = sample_negatives(rng, len(table), training.num_negatives, cand)
            batch = TrainBatch(triggers[rows], cand, labels[rows], negs)
            stats = train_step(batch, table, codebook, weights, optimizer,
                               schedule, training.reg_weight)
            history.append(stats.total)
            if log_every and optimizer.step % log_every == 0:
                print(f"step {optimizer.step}: loss {stats.total:.5f}")

    if codebook is None:
        # Short runs may end before any activation threshold; publish needs a
        # codebook, so build one from the final embeddings.
        codebook = init_codebook(_codebook_sample(table, cb_rng, layer_sizes),
                                 layer_sizes, cb_rng)
        optimizer.ensure_codebook(codebook)
        layer_ready = [True] * num_layers
    return (
        TrainerCheckpoint(table, codebook, optimizer, schedule, weights,
                          training.reg_weight, layer_sizes, seed, layer_ready),
        history,
    )


def save_checkpoint(path: str | Path, ckpt: TrainerCheckpoint) -> None:
    table = ckpt.table
    meta = {
        "num_items": len(table),
        "num_facets": table.num_facets,
        "dim": table.dim,
        "step": ckpt.optimizer.step,
        "learning_rate": ckpt.optimizer.learning_rate,
        "eps": ckpt.optimizer.eps,
        "layer_sizes": list(ckpt.layer_sizes),
        "warmup_steps": ckpt.schedule.warmup_steps,
        "per_layer_activation": list(ckpt.schedule.per_layer_activation),
        "w0": ckpt.loss_weights.w0,
        "w_layers": list(ckpt.loss_weights.w_layers),
        "aux_weight": ckpt.loss_weights.aux_weight,
        "reg_weight": ckpt.reg_weight,
        "init_seed": ckpt.init_seed,
        "layer_initialized": list(ckpt.layer_initialized),
        "has_codebook": ckpt.codebook is not None,
    }
    sections = {
        "meta": json.dumps(meta).encode(),
        "ids": np.ascontiguousarray(table.ids, dtype="<i8").tobytes(),
        "embeddings": np.ascontiguousarray(table.values, dtype="<f4").tobytes(),
        "adagrad_table": np.ascontiguousarray(ckpt.optimizer.table_acc, dtype="<f4").tobytes(),
    }
    if ckpt.codebook is not None:
        sections["codebook"] = codebook_to_bytes(ckpt.codebook)
        if ckpt.optimizer.codebook_acc is not None:
            sections["adagrad_codebook"] = codebook_to_bytes(
                Codebook([acc for acc in ckpt.optimizer.codebook_acc])
            )
    write_container(path, KIND_CHECKPOINT, ckpt.optimizer.step, sections)


def load_checkpoint(path: str | Path) -> TrainerCheckpoint:
    kind, _, sections = read_container(path)
    if kind != KIND_CHECKPOINT:
        raise ConsistencyError(f"expected a checkpoint container, got kind {kind}")
    meta = json.loads(sections["meta"].decode())
    count, num_facets, dim = meta["num_items"], meta["num_facets"], meta["dim"]
    ids = np.frombuffer(sections["ids"], dtype="<i8").astype(np.int64)
    values = np.frombuffer(sections["embeddings"], dtype="<f4").astype(np.float32)
    table = ItemEmbeddingTable(
        ids, values.reshape(count, num_facets, dim),
        {int(i): r for r, i in enumerate(ids)},
    )
    acc = np.frombuffer(sections["adagrad_table"], dtype="<f4").astype(np.float32)
    optimizer = AdagradState(
        meta["learning_rate"], meta["eps"], acc.reshape(count, num_facets, dim),
        step=meta["step"],
    )
    codebook = None
    if meta["has_codebook"]:
        codebook = codebook_from_bytes(sections["codebook"])
        if "adagrad_codebook" in sections:
            optimizer.codebook_acc = codebook_from_bytes(sections["adagrad_codebook"]).layers
    schedule = DelayedStartSchedule(meta["warmup_steps"], meta["per_layer_activation"])
    weights = LossWeights(meta["w0"], meta["w_layers"], meta["aux_weight"])
    return TrainerCheckpoint(
        table, codebook, optimizer, schedule, weights, meta["reg_weight"],
        tuple(meta["layer_sizes"]), meta["init_seed"], meta["layer_initialized"],
    )
