"""Item-to-item retrieval over published snapshots, no ANN search.

Four stages per request: look up each trigger's unified index vector,
sample indices per facet from a tempered trigger histogram, fetch the
index segments from the full snapshot plus fresh items bridged through
the remap, and rerank each segment against the mean trigger embedding of
the matching facet. Requests are read-only and rng-local, so any number
can run concurrently over the same snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SelectionConfig
from .errors import ConfigError, ConsistencyError, EmptyTriggerError
from .index_store import (
    DeltaSnapshot,
    FullSnapshot,
    fresh_indices_for,
    items_for_index,
    lookup_indices,
)
from .rng import SERVE_STREAM, spawn_rng


@dataclass
class RetrievalRequest:
    """Trigger ids are time-ordered, most recent last."""

    triggers: list[int]
    config: SelectionConfig = field(default_factory=SelectionConfig)


@dataclass
class IndexHistogram:
    counts: list[dict[int, float]]   # per facet: unified index -> boosted count
    probs: list[dict[int, float]]    # per facet: normalized distribution


@dataclass
class CandidateSet:
    """Per selected (facet, index): candidate ids from full plus delta."""

    per_index: list[tuple[int, int, np.ndarray]]  # (facet, index, sorted ids)
    merged: np.ndarray

    def __len__(self) -> int:
        return len(self.merged)


@dataclass
class RetrievedItem:
    item_id: int
    score: float
    index: int
    facet: int


@dataclass
class RetrievalResult:
    items: list[RetrievedItem]
    skipped_triggers: int
    indices_selected: int
    candidates_scanned: int


def index_lookup(
    request: RetrievalRequest, full: FullSnapshot
) -> tuple[np.ndarray, int]:
    """Unified index vectors of the known triggers, preserving trigger order."""
    rows = []
    skipped = 0
    for trigger in request.triggers:
        row = lookup_indices(full.item_to_index, trigger)
        if row is None:
            skipped += 1
        else:
            rows.append(row)
    if not rows:
        raise EmptyTriggerError(
            f"no known trigger among {len(request.triggers)} given"
        )
    return np.stack(rows), skipped


def build_histograms(
    index_rows: np.ndarray,
    config: SelectionConfig,
    invalid_values: list[int] | None = None,
) -> IndexHistogram:
    """Per-facet trigger counts; the most recent R triggers weigh more.

    Rows are trigger-ordered, most recent last. Entries equal to the
    facet's invalid value are dropped: the invalid index never retrieves.
    """
    index_rows = np.asarray(index_rows)
    if index_rows.ndim != 2 or index_rows.shape[0] == 0:
        raise ConfigError("expected a non-empty (T, F) index array")
    num_triggers, num_facets = index_rows.shape
    boost = config.recent_boost if config.enable_recent_boost else 1.0
    boosted_from = max(0, num_triggers - config.recent_window)
    counts: list[dict[int, float]] = []
    probs: list[dict[int, float]] = []
    for f in range(num_facets):
        h: dict[int, float] = {}
        for t in range(num_triggers):
            m = int(index_rows[t, f])
            if invalid_values is not None and m == invalid_values[f]:
                continue
            h[m] = h.get(m, 0.0) + (boost if t >= boosted_from else 1.0)
        total = sum(h.values())
        counts.append(h)
        probs.append({m: v / total for m, v in h.items()} if total else {})
    return IndexHistogram(counts, probs)


def temperature_distribution(p: dict[int, float], tau: float) -> dict[int, float]:
    """pi(m) = p(m)^(1/tau) / sum; tau=1 is the identity, tau->0 the argmax."""
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    if not p:
        return {}
    if tau == 1.0:
        total = sum(p.values())
        return {m: v / total for m, v in p.items()}
    powered = {m: float(v) ** (1.0 / tau) for m, v in p.items()}
    total = sum(powered.values())
    if total <= 0:  # extreme temperatures can underflow; fall back to argmax
        best = min(p, key=lambda m: (-p[m], m))
        return {m: (1.0 if m == best else 0.0) for m in p}
    return {m: v / total for m, v in powered.items()}


def select_indices(
    histogram: IndexHistogram,
    config: SelectionConfig,
    rng: np.random.Generator,
) -> list[list[int]]:
    """Without-replacement draws from the tempered distribution, per facet."""
    num_facets = len(histogram.probs)
    k_per_facet = config.resolved_k_per_facet(num_facets)
    selected: list[list[int]] = []
    for f in range(num_facets):
        pi = temperature_distribution(histogram.probs[f], config.tau)
        support = sorted(pi)
        weights = np.array([pi[m] for m in support], dtype=np.float64)
        picks: list[int] = []
        while support and len(picks) < k_per_facet[f]:
            total = weights.sum()
            if total <= 0:
                break
            r = rng.random() * total
            pos = int(np.searchsorted(np.cumsum(weights), r, side="right"))
            pos = min(pos, len(support) - 1)
            picks.append(support.pop(pos))
            weights = np.delete(weights, pos)
        selected.append(picks)
    return selected


def expand_longtail(
    selected: list[int], full: FullSnapshot, facet: int, budget: int
) -> list[int]:
    """Adds last-layer siblings under each selected index's upper prefix.

    Siblings come from the pre-rebalance tuple of each origin (split
    children therefore share their parent's siblings); per selected index
    the first `budget` children of the parent, ordered by id, are taken,
    the index itself counting against its own budget.
    """
    if budget <= 0:
        return list(selected)
    last_layer = full.layer_sizes[-1]
    origin_map = full.original_to_fine(facet)
    parent_children: dict[int, list[int]] = {}
    for original, fines in origin_map.items():
        parent_children.setdefault(original // last_layer, []).extend(fines)
    offset = int(full.index_to_item.value_offsets[facet])
    out = list(selected)
    present = set(selected)
    for m in selected:
        local = m - offset
        parents = sorted({o // last_layer for o in full.remap[facet][local]})
        for parent in parents:
            for child in sorted(set(parent_children.get(parent, [])))[:budget]:
                unified = offset + child
                if unified not in present:
                    present.add(unified)
                    out.append(unified)
    return out


def allocate_quota(
    h: dict[int, float], selected: list[int], q_tot: int, alpha: float
) -> dict[int, int]:
    """Q(m) = ceil(q_tot * h(m)^alpha / sum over selected); always >= 1."""
    if not selected:
        return {}
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    mass = {m: float(h.get(m, 0.0)) ** alpha if alpha > 0 else 1.0 for m in selected}
    total = sum(mass.values())
    if total <= 0:
        return {m: 1 for m in selected}
    return {
        m: max(1, int(np.ceil(q_tot * mass[m] / total))) for m in selected
    }


def item_selection(
    selected: list[list[int]],
    full: FullSnapshot,
    delta: DeltaSnapshot | None,
) -> CandidateSet:
    """Full-snapshot segments unioned with remap-bridged fresh items."""
    if delta is not None and delta.paired_full_id != full.snapshot_id:
        raise ConsistencyError("delta snapshot does not pair with this full snapshot")
    per_index: list[tuple[int, int, np.ndarray]] = []
    pieces: list[np.ndarray] = []
    for facet, picks in enumerate(selected):
        for m in picks:
            ids = items_for_index(full.index_to_item, m, facet=facet)
            if delta is not None and len(delta.ids):
                fresh: list[np.ndarray] = []
                for original in sorted(fresh_indices_for(full, m, facet=facet)):
                    fresh.append(delta.items_for_original(facet, original))
                if fresh:
                    ids = np.union1d(ids, np.concatenate(fresh))
            per_index.append((facet, int(m), ids))
            pieces.append(ids)
    merged = (
        np.unique(np.concatenate(pieces)) if pieces else np.zeros(0, dtype=np.int64)
    )
    return CandidateSet(per_index, merged)


def per_index_rerank(
    candidates: CandidateSet,
    query_vectors: np.ndarray,
    embed_fn,
    quotas: dict[tuple[int, int], int] | int,
) -> list[RetrievedItem]:
    """Top-quota per index by dot product against the facet's query vector.

    embed_fn maps an id array to (n, F, d) embeddings. Ties break toward
    the lower item id. Duplicates across indices keep the best score
    (earliest index on equal scores).
    """
    query_vectors = np.asarray(query_vectors, dtype=np.float32)
    best: dict[int, RetrievedItem] = {}
    order: list[int] = []
    for facet, m, ids in candidates.per_index:
        if len(ids) == 0:
            continue
        keep = quotas if isinstance(quotas, int) else quotas.get((facet, m), 0)
        if keep <= 0:
            continue
        emb = embed_fn(ids)
        scores = emb[:, facet, :].astype(np.float64) @ query_vectors[facet].astype(np.float64)
        ranked = np.lexsort((ids, -scores))[: min(keep, len(ids))]
        for pos in ranked:
            item = int(ids[pos])
            entry = RetrievedItem(item, float(scores[pos]), m, facet)
            held = best.get(item)
            if held is None:
                best[item] = entry
                order.append(item)
            elif entry.score > held.score:
                best[item] = entry
    return [best[item] for item in order]


class Retriever:
    """Binds snapshots to a checkpoint's embeddings for request serving."""

    def __init__(
        self,
        full: FullSnapshot,
        delta: DeltaSnapshot | None,
        checkpoint,
        config: SelectionConfig | None = None,
    ) -> None:
        if delta is not None and delta.paired_full_id != full.snapshot_id:
            raise ConsistencyError("delta snapshot does not pair with this full snapshot")
        self.full = full
        self.delta = delta
        self.checkpoint = checkpoint
        self.config = config or SelectionConfig()
        self._pool_ids = full.assignments.ids          # sorted by publish
        self._pool_emb = checkpoint.embeddings_for(self._pool_ids)
        if delta is not None and len(delta.ids):
            self._delta_ids = delta.ids                # sorted by publish
            self._delta_emb = checkpoint.embeddings_for(self._delta_ids)
        else:
            self._delta_ids = np.zeros(0, dtype=np.int64)
            self._delta_emb = np.zeros(
                (0,) + self._pool_emb.shape[1:], dtype=np.float32
            )

    @property
    def pool_ids(self) -> np.ndarray:
        return self._pool_ids

    @property
    def pool_embeddings(self) -> np.ndarray:
        return self._pool_emb

    @property
    def delta_ids(self) -> np.ndarray:
        return self._delta_ids

    @property
    def delta_embeddings(self) -> np.ndarray:
        return self._delta_emb

    def embed_candidates(self, ids: np.ndarray) -> np.ndarray:
        """Gather embeddings for pool and delta ids without per-id fallbacks."""
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty((len(ids),) + self._pool_emb.shape[1:], dtype=np.float32)
        pos = np.searchsorted(self._pool_ids, ids)
        pos = np.clip(pos, 0, max(0, len(self._pool_ids) - 1))
        in_pool = (
            (self._pool_ids[pos] == ids) if len(self._pool_ids) else np.zeros(len(ids), bool)
        )
        out[in_pool] = self._pool_emb[pos[in_pool]]
        missing = ~in_pool
        if missing.any():
            dpos = np.searchsorted(self._delta_ids, ids[missing])
            dpos = np.clip(dpos, 0, max(0, len(self._delta_ids) - 1))
            if len(self._delta_ids) == 0 or not np.all(
                self._delta_ids[dpos] == ids[missing]
            ):
                raise ConsistencyError("candidate id missing from both snapshots")
            out[missing] = self._delta_emb[dpos]
        return out

    def retrieve(
        self,
        triggers: list[int],
        seed: int = 0,
        config: SelectionConfig | None = None,
    ) -> RetrievalResult:
        config = config or self.config
        request = RetrievalRequest(list(triggers), config)
        rows, skipped = index_lookup(request, self.full)
        merged = self.full.merged_counts
        offsets = self.full.index_to_item.value_offsets
        invalid_values = [int(offsets[f]) + merged[f] for f in range(len(merged))]
        histogram = build_histograms(rows, config, invalid_values)
        rng = spawn_rng(seed, SERVE_STREAM)
        selected = select_indices(histogram, config, rng)
        if config.enable_longtail and rows.shape[0] < config.longtail_threshold:
            selected = [
                expand_longtail(picks, self.full, f, config.longtail_budget)
                for f, picks in enumerate(selected)
            ]
        candidates = item_selection(selected, self.full, self.delta)
        if config.use_quota:
            quotas: dict[tuple[int, int], int] | int = {}
            for f, picks in enumerate(selected):
                per_facet = allocate_quota(
                    histogram.counts[f], picks, config.q_tot, config.alpha
                )
                for m, q in per_facet.items():
                    quotas[(f, m)] = q
        else:
            quotas = config.top_n
        trigger_emb = self.checkpoint.embeddings_for(
            [t for t in request.triggers if t in self.full.item_to_index.row_offset]
        )
        query_vectors = trigger_emb.mean(axis=0)
        items = per_index_rerank(candidates, query_vectors, self.embed_candidates, quotas)
        scanned = int(sum(len(ids) for _, _, ids in candidates.per_index))
        return RetrievalResult(
            items=items,
            skipped_triggers=skipped,
            indices_selected=sum(len(p) for p in selected),
            candidates_scanned=scanned,
        )
