"""Post-training index rebalancing with hard size guarantees.

Oversized indices split via seeded k-means on the residuals entering the
last codebook layer; undersized indices merge into siblings under the same
upper-layer prefix; leftovers that cannot reach the lower bound anywhere
are parked on the invalid index. Children take fresh contiguous ids one
past the current index count. Feasibility note: bounds with
upper >= 2*lower - 1 always admit an in-bounds partition; tighter bounds
can force invalidation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .kernels import nearest_codeword
from .rng import REBALANCE_STREAM, spawn_rng


@dataclass(frozen=True)
class SizeBounds:
    lower: int
    upper: int

    def __post_init__(self) -> None:
        if not 0 < self.lower < self.upper:
            raise ConfigError("bounds must satisfy 0 < lower < upper")

    @property
    def target_size(self) -> int:
        return (self.lower + self.upper) // 2


@dataclass
class SplitEntry:
    original: int
    children: list[int]          # contiguous ids starting at the allocation point
    members: np.ndarray          # item rows that were reassigned
    child_of: np.ndarray         # child id per member, aligned with members


@dataclass
class MergeEntry:
    sources: list[int]  # undersized indices whose items moved
    target: int         # receiving index (smallest of the set, or a sibling)


@dataclass
class RebalancePlan:
    facet: int
    splits: list[SplitEntry] = field(default_factory=list)
    merges: list[MergeEntry] = field(default_factory=list)
    invalidated_indices: list[int] = field(default_factory=list)
    invalid_items: list[int] = field(default_factory=list)  # item rows


@dataclass
class FacetRebalance:
    facet: int
    new_local: np.ndarray   # (I,) post-rebalance local indices; invalid = num_indices
    num_indices: int        # valid local index count after splits
    plan: RebalancePlan
    fine_to_original: dict[int, set[int]]


def compute_sizes(indices: np.ndarray, invalid_value: int | None = None) -> dict[int, int]:
    """Histogram of items per index, skipping the invalid sentinel."""
    indices = np.asarray(indices)
    if indices.size == 0:
        return {}
    values, counts = np.unique(indices, return_counts=True)
    return {
        int(v): int(c)
        for v, c in zip(values, counts)
        if invalid_value is None or v != invalid_value
    }


def kmeans(
    points: np.ndarray, k: int, max_iters: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations; empty clusters are re-seeded from the farthest point.

    Returns (centroids, labels, per-iteration objective); the objective is
    non-increasing.
    """
    points = np.asarray(points, dtype=np.float32)
    if points.ndim != 2 or len(points) == 0:
        raise ConfigError("kmeans needs a non-empty (P, d) array")
    if not 1 <= k <= len(points):
        raise ConfigError(f"k={k} outside [1, {len(points)}]")
    centroids = points[rng.choice(len(points), size=k, replace=False)].copy()
    labels = np.zeros(len(points), dtype=np.int64)
    objectives: list[float] = []
    for _ in range(max_iters):
        labels, dists = nearest_codeword(points, centroids)
        empty = np.setdiff1d(np.arange(k), labels)
        if empty.size:
            # farthest points become the new seeds, worst offender first
            order = np.argsort(-dists, kind="stable")
            for centroid_idx, point_idx in zip(empty, order[: empty.size]):
                centroids[centroid_idx] = points[point_idx]
            labels, dists = nearest_codeword(points, centroids)
        objectives.append(float(dists.sum()))
        moved = False
        for j in range(k):
            members = labels == j
            if members.any():
                mean = points[members].mean(axis=0)
                if not np.array_equal(mean, centroids[j]):
                    centroids[j] = mean
                    moved = True
        if not moved:
            break
    labels, dists = nearest_codeword(points, centroids)
    objectives.append(float(dists.sum()))
    return centroids, labels, objectives


def _round_robin(count: int, groups: int) -> np.ndarray:
    return np.arange(count) % groups


def _split_groups(
    residuals: np.ndarray, bounds: SizeBounds, rng: np.random.Generator, depth: int = 0
) -> list[np.ndarray]:
    """Partition member positions into groups of size <= upper (recursive)."""
    size = len(residuals)
    parts = max(2, -(-size // bounds.target_size))  # ceil division
    if depth >= 8:
        labels = _round_robin(size, parts)
    else:
        _, labels, _ = kmeans(residuals, min(parts, size), max_iters=25, rng=rng)
        if len(np.unique(labels)) == 1 and size > bounds.upper:
            # degenerate geometry (identical points): k-means cannot separate
            labels = _round_robin(size, parts)
    groups: list[np.ndarray] = []
    for j in np.unique(labels):
        members = np.nonzero(labels == j)[0]
        if len(members) > bounds.upper:
            for sub in _split_groups(residuals[members], bounds, rng, depth + 1):
                groups.append(members[sub])
        else:
            groups.append(members)
    return groups


def split_oversized(
    index: int,
    member_rows: np.ndarray,
    residuals: np.ndarray,
    bounds: SizeBounds,
    rng: np.random.Generator,
    first_child_id: int,
) -> SplitEntry:
    """Split one oversized index; children get ids first_child_id, +1, ..."""
    member_rows = np.asarray(member_rows)
    if len(member_rows) <= bounds.upper:
        raise ConfigError(f"index {index} of size {len(member_rows)} is not oversized")
    if len(member_rows) != len(residuals):
        raise ConfigError("residual rows must match member rows")
    groups = _split_groups(np.asarray(residuals, dtype=np.float32), bounds, rng)
    children = [first_child_id + j for j in range(len(groups))]
    child_of = np.empty(len(member_rows), dtype=np.int64)
    for child, group in zip(children, groups):
        child_of[group] = child
    return SplitEntry(index, children, member_rows, child_of)


def merge_undersized(
    sizes: dict[int, int],
    bounds: SizeBounds,
    centroids: dict[int, np.ndarray] | None = None,
) -> tuple[list[MergeEntry], list[list[int]]]:
    """Merge a sibling group's undersized indices.

    Undersized members are chunked smallest-first so no merge overshoots the
    upper bound; each in-bounds chunk collapses into its smallest member
    (ties to the lower id). A leftover chunk below the lower bound is
    absorbed by the nearest non-oversized sibling that can take it, measured
    between centroids when given, else by id order. Chunks nobody can absorb
    are returned unresolved.
    """
    undersized = sorted(
        (m for m, s in sizes.items() if 0 < s < bounds.lower),
        key=lambda m: (sizes[m], m),
    )
    entries: list[MergeEntry] = []
    unresolved: list[list[int]] = []
    live = dict(sizes)

    chunks: list[list[int]] = []
    current: list[int] = []
    total = 0
    for m in undersized:
        if current and total + live[m] > bounds.upper:
            chunks.append(current)
            current, total = [], 0
        current.append(m)
        total += live[m]
    if current:
        chunks.append(current)

    for chunk in chunks:
        chunk_size = sum(live[m] for m in chunk)
        if chunk_size >= bounds.lower:
            target = min(chunk, key=lambda m: (live[m], m))
            entries.append(MergeEntry(sources=list(chunk), target=target))
            for m in chunk:
                live[m] = 0
            live[target] = chunk_size
            continue
        # below the lower bound even combined: find an absorbing sibling
        viable = [
            m for m, s in live.items()
            if m not in chunk and s >= bounds.lower and s + chunk_size <= bounds.upper
        ]
        if not viable:
            unresolved.append(list(chunk))
            continue
        if centroids is not None and all(m in centroids for m in viable + chunk):
            member_mean = np.mean([centroids[m] for m in chunk], axis=0)
            viable.sort(key=lambda m: (float(np.linalg.norm(centroids[m] - member_mean)), m))
            target = viable[0]
        else:
            target = min(viable)
        entries.append(MergeEntry(sources=list(chunk), target=target))
        for m in chunk:
            live[m] = 0
        live[target] += chunk_size
    return entries, unresolved


def prune_masked(
    indices: np.ndarray, mask: np.ndarray, invalid_value: int
) -> tuple[np.ndarray, list[int]]:
    """Masked items move to the invalid index; returns (new indices, rows)."""
    indices = np.asarray(indices)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != indices.shape:
        raise ConfigError("mask shape must match indices")
    out = indices.copy()
    out[mask] = invalid_value
    return out, np.nonzero(mask)[0].tolist()


def rebalance_facet(
    local: np.ndarray,
    residuals: np.ndarray,
    tuple_count: int,
    last_layer_size: int,
    bounds: SizeBounds,
    rng: np.random.Generator,
    facet: int = 0,
) -> FacetRebalance:
    """Rebalance one facet's local index assignment (indices in [0, tuple_count))."""
    local = np.asarray(local, dtype=np.int64)
    residuals = np.asarray(residuals, dtype=np.float32)
    if len(local) != len(residuals):
        raise ConfigError("residuals must cover every assigned item")
    if local.size and (local.min() < 0 or local.max() >= tuple_count):
        raise ConfigError("local index out of range")

    plan = RebalancePlan(facet=facet)
    new_local = local.copy()
    next_id = tuple_count
    # original prefix group of every index; split children inherit the parent's
    group_key: dict[int, int] = {m: m // last_layer_size for m in range(tuple_count)}
    remap: dict[int, set[int]] = {m: {m} for m in range(tuple_count)}

    sizes = np.bincount(local, minlength=tuple_count)
    for m in np.nonzero(sizes > bounds.upper)[0]:
        members = np.nonzero(local == m)[0]
        entry = split_oversized(int(m), members, residuals[members], bounds, rng, next_id)
        plan.splits.append(entry)
        new_local[entry.members] = entry.child_of
        for child in entry.children:
            group_key[child] = group_key[int(m)]
            remap[child] = {int(m)}
        remap[int(m)] = set()
        next_id += len(entry.children)

    live_sizes = compute_sizes(new_local)
    groups: dict[int, list[int]] = {}
    for idx in live_sizes:
        groups.setdefault(group_key[idx], []).append(idx)

    def centroid_of(idx: int) -> np.ndarray:
        rows = np.nonzero(new_local == idx)[0]
        return residuals[rows].mean(axis=0)

    unresolved_chunks: list[list[int]] = []
    for key in sorted(groups):
        members = groups[key]
        member_sizes = {m: live_sizes[m] for m in members}
        if not any(0 < s < bounds.lower for s in member_sizes.values()):
            continue
        centroids = {m: centroid_of(m) for m in members}
        entries, unresolved = merge_undersized(member_sizes, bounds, centroids)
        for entry in entries:
            _apply_merge(entry, new_local, live_sizes, remap, plan)
        unresolved_chunks.extend(unresolved)

    # chunks with no viable sibling: try any index anywhere, else invalidate
    for chunk in unresolved_chunks:
        chunk_size = sum(live_sizes.get(m, 0) for m in chunk)
        if chunk_size == 0:
            continue
        viable = [
            m for m, s in live_sizes.items()
            if m not in chunk and s >= bounds.lower and s + chunk_size <= bounds.upper
        ]
        if viable:
            mean = np.mean([centroid_of(m) for m in chunk], axis=0)
            viable.sort(key=lambda m: (float(np.linalg.norm(centroid_of(m) - mean)), m))
            entry = MergeEntry(sources=list(chunk), target=viable[0])
            _apply_merge(entry, new_local, live_sizes, remap, plan)
        else:
            for m in chunk:
                rows = np.nonzero(new_local == m)[0]
                new_local[rows] = next_id  # invalid sentinel = index count
                plan.invalidated_indices.append(m)
                plan.invalid_items.extend(rows.tolist())
                remap[m] = set()
                live_sizes.pop(m, None)

    return FacetRebalance(facet, new_local, next_id, plan, remap)


def _apply_merge(
    entry: MergeEntry,
    new_local: np.ndarray,
    live_sizes: dict[int, int],
    remap: dict[int, set[int]],
    plan: RebalancePlan,
) -> None:
    moved = 0
    covered: set[int] = set()
    for src in entry.sources:
        if src == entry.target:
            covered |= remap[src]
            continue
        rows = np.nonzero(new_local == src)[0]
        new_local[rows] = entry.target
        moved += len(rows)
        covered |= remap[src]
        remap[src] = set()
        live_sizes.pop(src, None)
    remap[entry.target] |= covered
    live_sizes[entry.target] = live_sizes.get(entry.target, 0) + moved
    plan.merges.append(entry)


def rebalance(
    local_indices: np.ndarray,
    residuals: np.ndarray,
    tuple_count: int,
    last_layer_size: int,
    bounds: SizeBounds,
    seed: int,
) -> list[FacetRebalance]:
    """Rebalance every facet independently; deterministic given the seed."""
    local_indices = np.asarray(local_indices, dtype=np.int64)
    residuals = np.asarray(residuals, dtype=np.float32)
    if local_indices.ndim != 2 or residuals.ndim != 3:
        raise ConfigError("expected (I, F) indices and (I, F, d) residuals")
    if local_indices.shape != residuals.shape[:2]:
        raise ConfigError("residuals must cover every assigned item")
    results = []
    for f in range(local_indices.shape[1]):
        rng = spawn_rng(seed, REBALANCE_STREAM, f)
        results.append(
            rebalance_facet(
                local_indices[:, f], residuals[:, f, :], tuple_count,
                last_layer_size, bounds, rng, facet=f,
            )
        )
    return results


def plan_records(result: FacetRebalance) -> list[dict]:
    """Audit records for one facet: one dict per split, merge, invalidation."""
    records: list[dict] = []
    for entry in result.plan.splits:
        records.append({
            "op": "split",
            "facet": result.facet,
            "index": int(entry.original),
            "children": [int(c) for c in entry.children],
            "size": int(len(entry.members)),
        })
    for entry in result.plan.merges:
        records.append({
            "op": "merge",
            "facet": result.facet,
            "sources": [int(s) for s in entry.sources],
            "target": int(entry.target),
        })
    for m in result.plan.invalidated_indices:
        records.append({"op": "invalidate", "facet": result.facet, "index": int(m)})
    return records


def write_plan(path: str | Path, results: list[FacetRebalance]) -> None:
    """Line-delimited audit log, every facet's records in order."""
    with open(path, "w") as fh:
        for result in results:
            for record in plan_records(result):
                fh.write(json.dumps(record, sort_keys=True) + "\n")
