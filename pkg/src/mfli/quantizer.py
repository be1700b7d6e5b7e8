"""Multifaceted residual quantization.

Each facet of an item embedding is quantized independently through L
codebook layers: layer l snaps the incoming residual to its nearest
codeword (squared Euclidean, lowest index on ties) and passes the
difference on. The index tuple (k_1..k_L) per facet is the item's
position in the learnable index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError
from .kernels import nearest_codeword


@dataclass
class Codebook:
    """L layers of per-facet codeword tables, layer l shaped (F, N_l, d)."""

    layers: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("codebook needs at least one layer")
        f, _, d = self.layers[0].shape
        for i, layer in enumerate(self.layers):
            if layer.ndim != 3:
                raise ConfigError(f"layer {i} is not a (F, N, d) tensor")
            if layer.shape[0] != f or layer.shape[2] != d:
                raise ConfigError("codebook layers disagree on facet count or dim")
            if layer.shape[1] <= 0:
                raise ConfigError(f"layer {i} has no codewords")
            if not np.all(np.isfinite(layer)):
                raise ConsistencyError(f"layer {i} contains non-finite codewords")

    @property
    def num_facets(self) -> int:
        return self.layers[0].shape[0]

    @property
    def dim(self) -> int:
        return self.layers[0].shape[2]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(layer.shape[1] for layer in self.layers)

    def copy(self) -> "Codebook":
        return Codebook([layer.copy() for layer in self.layers])


@dataclass
class QuantizationResult:
    """Per-facet index tuples plus the residual/reconstruction chain."""

    indices: np.ndarray        # (L, F) int64
    residuals: np.ndarray      # (L, F, d); residuals[l-1] is r_l
    reconstructions: np.ndarray  # (L, F, d); reconstructions[l-1] is the sum q_1..q_l


@dataclass
class BatchQuantization:
    indices: np.ndarray                    # (I, L, F) int64
    last_input_residuals: np.ndarray | None  # (I, F, d): residual entering layer L
    final_residuals: np.ndarray | None       # (I, F, d): residual after layer L


@dataclass
class DelayedStartSchedule:
    """Step thresholds gating the quantized loss terms, one per layer."""

    warmup_steps: int
    per_layer_activation: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        acts = self.per_layer_activation
        if acts:
            if acts[0] < self.warmup_steps:
                raise ConfigError("first layer activation precedes warmup end")
            if any(b < a for a, b in zip(acts, acts[1:])):
                raise ConfigError("per_layer_activation must be non-decreasing")


def is_layer_active(schedule: DelayedStartSchedule, layer: int, step: int) -> bool:
    """Layer is 1-based; activation is inclusive at the threshold step."""
    if not 1 <= layer <= len(schedule.per_layer_activation):
        raise ConfigError(f"layer {layer} outside schedule")
    return step >= schedule.per_layer_activation[layer - 1]


def assign(residual: np.ndarray, layer_codebook: np.ndarray) -> int:
    """Nearest codeword index for one residual; ties go to the lowest index."""
    residual = np.asarray(residual)
    if residual.ndim != 1:
        raise ConfigError("assign expects a single d-vector")
    idx, _ = nearest_codeword(residual[None, :], layer_codebook)
    return int(idx[0])


def assign_batch(residuals: np.ndarray, layer_codebook: np.ndarray) -> np.ndarray:
    idx, _ = nearest_codeword(residuals, layer_codebook)
    return idx


def init_codebook(
    embedding_sample: np.ndarray,
    layer_sizes: tuple[int, ...] | list[int],
    rng: np.random.Generator,
) -> Codebook:
    """Build the codebook layer by layer from sampled embeddings.

    Layer 1 takes N_1 distinct sample embeddings per facet; layer l > 1 takes
    N_l distinct layer-(l-1) residuals of the sample under the layers built
    so far. Sampling is uniform without replacement.
    """
    sample = np.asarray(embedding_sample, dtype=np.float32)
    if sample.ndim != 3:
        raise ConfigError("embedding_sample must be (S, F, d)")
    size, num_facets, dim = sample.shape
    sizes = tuple(int(n) for n in layer_sizes)
    if not sizes or any(n <= 0 for n in sizes):
        raise ConfigError("layer_sizes must be positive")
    if size < max(sizes):
        raise ConfigError(f"sample of {size} embeddings < largest layer {max(sizes)}")

    residual = sample.copy()
    layers: list[np.ndarray] = []
    for n in sizes:
        layer = np.empty((num_facets, n, dim), dtype=np.float32)
        for f in range(num_facets):
            rows = rng.choice(size, size=n, replace=False)
            layer[f] = residual[rows, f, :]
        layers.append(layer)
        for f in range(num_facets):
            idx = assign_batch(residual[:, f, :], layer[f])
            residual[:, f, :] -= layer[f][idx]
    return Codebook(layers)


def quantize(v: np.ndarray, codebook: Codebook) -> QuantizationResult:
    v = np.asarray(v, dtype=np.float32)
    if v.shape != (codebook.num_facets, codebook.dim):
        raise ConfigError(
            f"embedding shape {v.shape} != (F, d) = "
            f"({codebook.num_facets}, {codebook.dim})"
        )
    num_layers = codebook.num_layers
    num_facets = codebook.num_facets
    indices = np.empty((num_layers, num_facets), dtype=np.int64)
    residuals = np.empty((num_layers, num_facets, codebook.dim), dtype=np.float32)
    recons = np.empty_like(residuals)
    residual = v.copy()
    recon = np.zeros_like(v)
    for l, layer in enumerate(codebook.layers):
        for f in range(num_facets):
            k = assign(residual[f], layer[f])
            indices[l, f] = k
            residual[f] -= layer[f, k]
            recon[f] += layer[f, k]
        residuals[l] = residual
        recons[l] = recon
    return QuantizationResult(indices, residuals, recons)


def quantize_batch(
    embeddings: np.ndarray, codebook: Codebook, keep_residuals: bool = True
) -> BatchQuantization:
    emb = np.asarray(embeddings, dtype=np.float32)
    if emb.ndim != 3 or emb.shape[1:] != (codebook.num_facets, codebook.dim):
        raise ConfigError("embeddings must be (I, F, d) matching the codebook")
    count = emb.shape[0]
    num_layers = codebook.num_layers
    indices = np.empty((count, num_layers, codebook.num_facets), dtype=np.int64)
    residual = emb.copy()
    last_input = None
    for l, layer in enumerate(codebook.layers):
        if keep_residuals and l == num_layers - 1:
            last_input = residual.copy()
        for f in range(codebook.num_facets):
            idx = assign_batch(residual[:, f, :], layer[f])
            indices[:, l, f] = idx
            residual[:, f, :] -= layer[f][idx]
    if not keep_residuals:
        return BatchQuantization(indices, None, None)
    return BatchQuantization(indices, last_input, residual)


def reconstruct(result: QuantizationResult, layer: int) -> np.ndarray:
    """Partial reconstruction through the given 1-based layer."""
    if not 1 <= layer <= result.reconstructions.shape[0]:
        raise ConfigError(f"layer {layer} out of range")
    return result.reconstructions[layer - 1]


def codebook_reg_loss(layer_codebook: np.ndarray, batch_residuals: np.ndarray) -> float:
    """Utilization penalty: mean over codewords of the squared mean distance
    from the codeword to the batch residuals.
    """
    codes = np.asarray(layer_codebook, dtype=np.float64)
    res = np.asarray(batch_residuals, dtype=np.float64)
    if codes.ndim != 3 or res.ndim != 3 or codes.shape[0] != res.shape[0]:
        raise ConfigError("expected (F, N, d) codebook and (F, B, d) residuals")
    batch = res.shape[1]
    if batch == 0:
        raise ConfigError("empty residual batch")
    diff = codes[:, :, None, :] - res[:, None, :, :]  # (F, N, B, d)
    dist = np.sqrt((diff ** 2).sum(axis=3))  # (F, N, B)
    mean_dist = dist.sum(axis=2) / batch  # (F, N)
    num_facets, n = mean_dist.shape
    return float((mean_dist ** 2).sum() / (num_facets * n))


def codebook_reg_grad(layer_codebook: np.ndarray, batch_residuals: np.ndarray) -> np.ndarray:
    """Gradient of codebook_reg_loss w.r.t. the codewords, shape (F, N, d).

    Zero-distance pairs contribute a zero subgradient.
    """
    codes = np.asarray(layer_codebook, dtype=np.float64)
    res = np.asarray(batch_residuals, dtype=np.float64)
    batch = res.shape[1]
    if batch == 0:
        raise ConfigError("empty residual batch")
    diff = codes[:, :, None, :] - res[:, None, :, :]  # (F, N, B, d)
    dist = np.sqrt((diff ** 2).sum(axis=3))  # (F, N, B)
    mean_dist = dist.sum(axis=2) / batch  # (F, N)
    safe = np.where(dist > 0, dist, 1.0)
    unit = diff / safe[..., None]
    unit = np.where((dist > 0)[..., None], unit, 0.0)
    num_facets, n = mean_dist.shape
    scale = 2.0 * mean_dist / (num_facets * n * batch)  # (F, N)
    return (scale[:, :, None, None] * unit).sum(axis=2)


CODEBOOK_HEADER = struct.Struct("<III")


def codebook_to_bytes(codebook: Codebook) -> bytes:
    """Per layer: (F, N_l, d) as u32 LE, then row-major float32 codewords."""
    parts = [struct.pack("<I", codebook.num_layers)]
    for layer in codebook.layers:
        f, n, d = layer.shape
        parts.append(CODEBOOK_HEADER.pack(f, n, d))
        parts.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    return b"".join(parts)


def codebook_from_bytes(blob: bytes) -> Codebook:
    if len(blob) < 4:
        raise ConsistencyError("codebook blob truncated")
    (num_layers,) = struct.unpack_from("<I", blob, 0)
    offset = 4
    layers = []
    for _ in range(num_layers):
        if offset + CODEBOOK_HEADER.size > len(blob):
            raise ConsistencyError("codebook blob truncated")
        f, n, d = CODEBOOK_HEADER.unpack_from(blob, offset)
        offset += CODEBOOK_HEADER.size
        nbytes = f * n * d * 4
        if offset + nbytes > len(blob):
            raise ConsistencyError("codebook blob truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=f * n * d, offset=offset)
        layers.append(arr.reshape(f, n, d).astype(np.float32))
        offset += nbytes
    if offset != len(blob):
        raise ConsistencyError("trailing bytes after codebook layers")
    return Codebook(layers)
