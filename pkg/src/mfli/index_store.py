"""Unified index encoding, lookup maps, and snapshot publishing.

The codeword tuple of each facet collapses to one integer (mixed radix,
suffix products), facet ranges are made disjoint by prefix-sum offsets,
and two dense structures serve retrieval: item id -> unified index vector
and unified index -> item id segment. Full snapshots quantize + rebalance
the whole pool; delta snapshots assign fresh items their pre-rebalance
indices only, bridged at read time by the recorded remap.

Layout note: each facet owns merged_counts[f] + 1 slots in the counts
tensor (the extra slot collects invalidated items), so the items tensor
holds every item once per facet, grouped by facet block. Facet f's
invalid *value* offset_f + M_f numerically equals facet f+1's first valid
value; entries are positional per facet, so lookups that cross facets
must say which facet they mean.
"""

from __future__ import annotations

import json
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .container import (
    KIND_DELTA,
    KIND_FULL,
    pack_container,
    unpack_container,
)
from .errors import ConfigError, ConsistencyError, SnapshotFormatError, TruncatedSnapshotError
from .quantizer import Codebook, codebook_to_bytes, quantize_batch
from .rebalance import FacetRebalance, SizeBounds, rebalance, write_plan


# ----------------------------------------------------------- unified encoding


def encode_unified(tuple_indices: Sequence[int], layer_sizes: Sequence[int]) -> int:
    """Mixed-radix encode: c = sum_l c_l * prod_{k>l} N_k."""
    if len(tuple_indices) != len(layer_sizes):
        raise ConfigError("tuple length must match layer count")
    code = 0
    for c, n in zip(tuple_indices, layer_sizes):
        if not 0 <= c < n:
            raise ConfigError(f"component {c} outside [0, {n})")
        code = code * n + c
    return code


def decode_unified(scalar: int, layer_sizes: Sequence[int]) -> tuple[int, ...]:
    total = 1
    for n in layer_sizes:
        total *= n
    if not 0 <= scalar < total:
        raise ConfigError(f"scalar {scalar} outside [0, {total})")
    out = []
    for n in reversed(layer_sizes):
        out.append(scalar % n)
        scalar //= n
    return tuple(reversed(out))


def encode_unified_batch(indices: np.ndarray, layer_sizes: Sequence[int]) -> np.ndarray:
    """Vectorized encode of an (I, L, F) index tensor to (I, F)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 3 or indices.shape[1] != len(layer_sizes):
        raise ConfigError("expected an (I, L, F) index tensor")
    code = np.zeros((indices.shape[0], indices.shape[2]), dtype=np.int64)
    for l, n in enumerate(layer_sizes):
        layer = indices[:, l, :]
        if layer.size and (layer.min() < 0 or layer.max() >= n):
            raise ConfigError(f"layer {l + 1} component outside [0, {n})")
        code = code * n + layer
    return code


def facet_offset(facet_index: int, facet: int, merged_counts: Sequence[int]) -> int:
    """Global unified entry for a facet-local index; local M_f is the invalid value."""
    if not 0 <= facet < len(merged_counts):
        raise ConfigError(f"facet {facet} outside [0, {len(merged_counts)})")
    if not 0 <= facet_index <= merged_counts[facet]:
        raise ConfigError(
            f"facet index {facet_index} outside [0, {merged_counts[facet]}]"
        )
    return int(sum(merged_counts[:facet])) + int(facet_index)


# ------------------------------------------------------------------ map types


@dataclass
class AssignmentTable:
    """Item ids with their unified index vector (facet offsets applied)."""

    ids: np.ndarray            # (I,) int64
    rows: np.ndarray           # (I, F) int64
    merged_counts: list[int]   # valid index count per facet; invalid = offset + M_f

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if self.rows.ndim != 2 or self.rows.shape != (len(self.ids), len(self.merged_counts)):
            raise ConfigError("rows must be (len(ids), len(merged_counts))")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ConsistencyError("duplicate item id in assignment table")
        offsets = self.offsets
        for f, m_f in enumerate(self.merged_counts):
            col = self.rows[:, f]
            if col.size and (col.min() < offsets[f] or col.max() > offsets[f] + m_f):
                raise ConfigError(f"facet {f} entry outside its unified range")

    @property
    def num_facets(self) -> int:
        return len(self.merged_counts)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.merged_counts)])[:-1].astype(np.int64)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ItemToIndexMap:
    row_offset: dict[int, int]   # item id -> row, constant-time
    index_tensor: np.ndarray     # (I, F) unified entries


@dataclass
class IndexToItemMap:
    counts: np.ndarray        # (sum_f (M_f + 1),) items per slot, invalid slot last per facet
    items: np.ndarray         # (I * F,) ids grouped by facet block, segment-sorted by id
    prefix: np.ndarray        # (len(counts) + 1,) segment boundaries into items
    merged_counts: list[int]

    @property
    def slot_offsets(self) -> np.ndarray:
        per_facet = np.asarray(self.merged_counts, dtype=np.int64) + 1
        return np.concatenate([[0], np.cumsum(per_facet)])[:-1]

    @property
    def value_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.merged_counts)])[:-1].astype(np.int64)


def build_maps(assignments: AssignmentTable) -> tuple[ItemToIndexMap, IndexToItemMap]:
    """Dense lookup structures; segments sorted by item id."""
    ids = assignments.ids
    rows = assignments.rows
    num_facets = assignments.num_facets
    row_offset = {int(item): pos for pos, item in enumerate(ids)}

    per_facet = [m + 1 for m in assignments.merged_counts]
    total_slots = int(sum(per_facet))
    counts = np.zeros(total_slots, dtype=np.int64)
    blocks = []
    slot_base = 0
    offsets = assignments.offsets
    for f in range(num_facets):
        local = rows[:, f] - offsets[f]          # in [0, M_f], M_f = invalid
        counts[slot_base : slot_base + per_facet[f]] = np.bincount(
            local, minlength=per_facet[f]
        )
        order = np.lexsort((ids, local))
        blocks.append(ids[order])
        slot_base += per_facet[f]
    items = np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.int64)
    prefix = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return (
        ItemToIndexMap(row_offset, rows.copy()),
        IndexToItemMap(counts, items, prefix, list(assignments.merged_counts)),
    )


def lookup_indices(item_map: ItemToIndexMap, item_id: int) -> np.ndarray | None:
    """The stored unified vector, or None when the id is unknown."""
    row = item_map.row_offset.get(int(item_id))
    if row is None:
        return None
    return item_map.index_tensor[row].copy()


def _resolve_facet(index_map: IndexToItemMap, m: int, facet: int | None) -> tuple[int, int]:
    """Returns (facet, local index); local == M_f means the invalid slot."""
    value_offsets = index_map.value_offsets
    merged = index_map.merged_counts
    if facet is not None:
        if not 0 <= facet < len(merged):
            raise ConfigError(f"facet {facet} out of range")
        local = int(m) - int(value_offsets[facet])
        if not 0 <= local <= merged[facet]:
            raise ConfigError(f"index {m} outside facet {facet} range")
        return facet, local
    total = int(value_offsets[-1]) + merged[-1] if merged else 0
    if not 0 <= m <= total:
        raise ConfigError(f"index {m} outside [0, {total}]")
    for f in range(len(merged)):
        local = int(m) - int(value_offsets[f])
        if 0 <= local < merged[f]:
            return f, local
    # only the trailing invalid value is facet-ambiguous-free; report last facet
    return len(merged) - 1, merged[-1]


def items_for_index(index_map: IndexToItemMap, m: int, facet: int | None = None) -> np.ndarray:
    """Item ids of one unified index segment; invalid indices yield nothing.

    Facet f's invalid value aliases facet f+1's first valid value, so pass
    `facet` whenever the caller knows it (valid values resolve uniquely
    without it).
    """
    f, local = _resolve_facet(index_map, m, facet)
    if local == index_map.merged_counts[f]:
        return np.zeros(0, dtype=np.int64)
    slot = int(index_map.slot_offsets[f]) + local
    start, stop = int(index_map.prefix[slot]), int(index_map.prefix[slot + 1])
    return index_map.items[start:stop].copy()


# ------------------------------------------------------------------ snapshots


@dataclass
class FullSnapshot:
    snapshot_id: str
    created_at: int
    assignments: AssignmentTable
    item_to_index: ItemToIndexMap
    index_to_item: IndexToItemMap
    remap: list[list[frozenset[int]]]   # per facet, fine local index -> originals
    layer_sizes: tuple[int, ...]
    codebook_version: str
    _original_to_fine: list[dict[int, list[int]]] | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def num_facets(self) -> int:
        return self.assignments.num_facets

    @property
    def merged_counts(self) -> list[int]:
        return self.assignments.merged_counts

    @property
    def tuple_count(self) -> int:
        total = 1
        for n in self.layer_sizes:
            total *= n
        return total

    def original_to_fine(self, facet: int) -> dict[int, list[int]]:
        """Inverse of the remap: pre-rebalance index -> fine local indices."""
        if self._original_to_fine is None:
            inverted: list[dict[int, list[int]]] = []
            for facet_remap in self.remap:
                table: dict[int, list[int]] = {}
                for fine, originals in enumerate(facet_remap):
                    for orig in sorted(originals):
                        table.setdefault(orig, []).append(fine)
                inverted.append(table)
            self._original_to_fine = inverted
        return self._original_to_fine[facet]


@dataclass
class DeltaSnapshot:
    snapshot_id: str
    created_at: int
    paired_full_id: str
    codebook_version: str
    layer_sizes: tuple[int, ...]
    ids: np.ndarray              # (n,) fresh item ids
    original_rows: np.ndarray    # (n, F) pre-rebalance local indices
    _inverse: list[dict[int, np.ndarray]] | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def num_facets(self) -> int:
        return self.original_rows.shape[1] if self.original_rows.ndim == 2 else 0

    def items_for_original(self, facet: int, original: int) -> np.ndarray:
        """Fresh item ids quantized to a pre-rebalance index on one facet."""
        if self._inverse is None:
            inverse: list[dict[int, np.ndarray]] = []
            for f in range(self.num_facets):
                col = self.original_rows[:, f]
                table: dict[int, np.ndarray] = {}
                for value in np.unique(col):
                    table[int(value)] = np.sort(self.ids[col == value])
                inverse.append(table)
            self._inverse = inverse
        return self._inverse[facet].get(int(original), np.zeros(0, dtype=np.int64)).copy()


def _codebook_version(codebook: Codebook) -> str:
    return f"{zlib.crc32(codebook_to_bytes(codebook)):08x}"


def publish_full_snapshot(
    checkpoint, item_pool: Iterable[int], bounds: SizeBounds, tick: int,
    seed: int | None = None, plan_out: str | Path | None = None,
) -> FullSnapshot:
    """Quantize the pool, rebalance every facet, and freeze the lookup maps.

    Deterministic: the pool is sorted by id and the rebalance rng derives
    from the checkpoint's init seed unless an explicit seed is given.
    `plan_out` dumps the rebalance plans as a line-delimited audit log.
    """
    codebook = checkpoint.codebook
    if codebook is None:
        raise ConsistencyError("checkpoint has no codebook; train before publishing")
    if seed is None:
        seed = checkpoint.init_seed
    ids = np.unique(np.asarray(list(item_pool), dtype=np.int64))
    embeddings = checkpoint.embeddings_for(ids)
    batch = quantize_batch(embeddings, codebook, keep_residuals=True)
    layer_sizes = codebook.layer_sizes
    unified_local = encode_unified_batch(batch.indices, layer_sizes)
    tuple_count = int(np.prod(layer_sizes))
    results: list[FacetRebalance] = rebalance(
        unified_local, batch.last_input_residuals, tuple_count,
        layer_sizes[-1], bounds, seed,
    )
    if plan_out is not None:
        write_plan(plan_out, results)
    merged_counts = [res.num_indices for res in results]
    rows = np.empty((len(ids), len(results)), dtype=np.int64)
    offset = 0
    for f, res in enumerate(results):
        rows[:, f] = offset + res.new_local
        offset += res.num_indices
    assignments = AssignmentTable(ids, rows, merged_counts)
    item_map, index_map = build_maps(assignments)
    remap = [
        [frozenset(res.fine_to_original[m]) for m in range(res.num_indices)]
        for res in results
    ]
    return FullSnapshot(
        snapshot_id=f"full-{tick:010d}",
        created_at=int(tick),
        assignments=assignments,
        item_to_index=item_map,
        index_to_item=index_map,
        remap=remap,
        layer_sizes=layer_sizes,
        codebook_version=_codebook_version(codebook),
    )


def publish_delta_snapshot(
    checkpoint, fresh_items: Iterable[int], tick: int, full: FullSnapshot
) -> DeltaSnapshot:
    """Assign fresh items their pre-rebalance indices; no rebalancing."""
    codebook = checkpoint.codebook
    if codebook is None:
        raise ConsistencyError("checkpoint has no codebook; train before publishing")
    version = _codebook_version(codebook)
    if version != full.codebook_version:
        raise ConsistencyError(
            "delta checkpoint codebook differs from the paired full snapshot"
        )
    ids = np.unique(np.asarray(list(fresh_items), dtype=np.int64))
    if len(ids):
        embeddings = checkpoint.embeddings_for(ids)
        batch = quantize_batch(embeddings, codebook, keep_residuals=False)
        original_rows = encode_unified_batch(batch.indices, codebook.layer_sizes)
    else:
        original_rows = np.zeros((0, codebook.num_facets), dtype=np.int64)
    return DeltaSnapshot(
        snapshot_id=f"delta-{tick:010d}",
        created_at=int(tick),
        paired_full_id=full.snapshot_id,
        codebook_version=version,
        layer_sizes=codebook.layer_sizes,
        ids=ids,
        original_rows=original_rows,
    )


def fresh_indices_for(full: FullSnapshot, m: int, facet: int | None = None) -> frozenset[int]:
    """Pre-rebalance indices feeding fine index m (remap lookup)."""
    f, local = _resolve_facet(full.index_to_item, m, facet)
    if local == full.merged_counts[f]:
        return frozenset()
    return full.remap[f][local]


# -------------------------------------------------------------- serialization


def _write_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ConfigError("varint values must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        out.append(byte | (0x80 if value else 0))
        if not value:
            return


def _read_varint(blob: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(blob):
            raise TruncatedSnapshotError("varint overruns section")
        byte = blob[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


def _pack_remap(remap: list[list[frozenset[int]]]) -> bytes:
    out = bytearray()
    _write_varint(out, len(remap))
    for facet_remap in remap:
        _write_varint(out, len(facet_remap))
        for originals in facet_remap:
            _write_varint(out, len(originals))
            for value in sorted(originals):
                _write_varint(out, value)
    return bytes(out)


def _unpack_remap(blob: bytes) -> list[list[frozenset[int]]]:
    pos = 0
    num_facets, pos = _read_varint(blob, pos)
    remap: list[list[frozenset[int]]] = []
    for _ in range(num_facets):
        count, pos = _read_varint(blob, pos)
        facet_remap: list[frozenset[int]] = []
        for _ in range(count):
            size, pos = _read_varint(blob, pos)
            members = []
            for _ in range(size):
                value, pos = _read_varint(blob, pos)
                members.append(value)
            facet_remap.append(frozenset(members))
        remap.append(facet_remap)
    if pos != len(blob):
        raise TruncatedSnapshotError("trailing bytes after remap")
    return remap


def _require(sections: dict[str, bytes], name: str) -> bytes:
    if name not in sections:
        raise TruncatedSnapshotError(f"missing section {name!r}")
    return sections[name]


def serialize_snapshot(snapshot: FullSnapshot | DeltaSnapshot) -> bytes:
    if isinstance(snapshot, FullSnapshot):
        meta = {
            "snapshot_id": snapshot.snapshot_id,
            "layer_sizes": list(snapshot.layer_sizes),
            "codebook_version": snapshot.codebook_version,
        }
        table = snapshot.assignments
        assignment = np.concatenate(
            [table.ids[:, None], table.rows], axis=1
        ).astype("<u8")
        sections = {
            "meta": json.dumps(meta, sort_keys=True).encode(),
            "merged_counts": np.asarray(table.merged_counts, dtype="<u8").tobytes(),
            "assignment": assignment.tobytes(),
            "counts": snapshot.index_to_item.counts.astype("<u8").tobytes(),
            "items": snapshot.index_to_item.items.astype("<u8").tobytes(),
            "remap": _pack_remap(snapshot.remap),
        }
        return pack_container(KIND_FULL, snapshot.created_at, sections)
    if isinstance(snapshot, DeltaSnapshot):
        meta = {
            "snapshot_id": snapshot.snapshot_id,
            "paired_full_id": snapshot.paired_full_id,
            "codebook_version": snapshot.codebook_version,
            "layer_sizes": list(snapshot.layer_sizes),
            "num_facets": snapshot.num_facets,
        }
        assignment = np.concatenate(
            [snapshot.ids[:, None], snapshot.original_rows], axis=1
        ).astype("<u8")
        sections = {
            "meta": json.dumps(meta, sort_keys=True).encode(),
            "assignment": assignment.tobytes(),
        }
        return pack_container(KIND_DELTA, snapshot.created_at, sections)
    raise ConfigError(f"cannot serialize {type(snapshot).__name__}")


def _read_u64_matrix(blob: bytes, columns: int, name: str) -> np.ndarray:
    flat = np.frombuffer(blob, dtype="<u8")
    if columns and flat.size % columns:
        raise TruncatedSnapshotError(f"section {name!r} is not a whole matrix")
    rows = flat.size // columns if columns else 0
    return flat.reshape(rows, columns).astype(np.int64)


def deserialize_snapshot(blob: bytes) -> FullSnapshot | DeltaSnapshot:
    kind, created_at, sections = unpack_container(blob)
    meta = json.loads(_require(sections, "meta").decode())
    if kind == KIND_FULL:
        merged_counts = [
            int(v) for v in np.frombuffer(_require(sections, "merged_counts"), dtype="<u8")
        ]
        assignment = _read_u64_matrix(
            _require(sections, "assignment"), 1 + len(merged_counts), "assignment"
        )
        table = AssignmentTable(assignment[:, 0], assignment[:, 1:], merged_counts)
        item_map, index_map = build_maps(table)
        stored_counts = np.frombuffer(_require(sections, "counts"), dtype="<u8").astype(np.int64)
        stored_items = np.frombuffer(_require(sections, "items"), dtype="<u8").astype(np.int64)
        if not np.array_equal(stored_counts, index_map.counts) or not np.array_equal(
            stored_items, index_map.items
        ):
            raise ConsistencyError("stored lookup tensors disagree with assignments")
        remap = _unpack_remap(_require(sections, "remap"))
        return FullSnapshot(
            snapshot_id=meta["snapshot_id"],
            created_at=created_at,
            assignments=table,
            item_to_index=item_map,
            index_to_item=index_map,
            remap=remap,
            layer_sizes=tuple(meta["layer_sizes"]),
            codebook_version=meta["codebook_version"],
        )
    if kind == KIND_DELTA:
        num_facets = int(meta["num_facets"])
        assignment = _read_u64_matrix(
            _require(sections, "assignment"), 1 + num_facets, "assignment"
        )
        return DeltaSnapshot(
            snapshot_id=meta["snapshot_id"],
            created_at=created_at,
            paired_full_id=meta["paired_full_id"],
            codebook_version=meta["codebook_version"],
            layer_sizes=tuple(meta["layer_sizes"]),
            ids=assignment[:, 0],
            original_rows=assignment[:, 1:],
        )
    raise SnapshotFormatError(f"container kind {kind} is not a snapshot")


def write_snapshot(path: str | Path, snapshot: FullSnapshot | DeltaSnapshot) -> None:
    Path(path).write_bytes(serialize_snapshot(snapshot))


def read_snapshot(path: str | Path) -> FullSnapshot | DeltaSnapshot:
    return deserialize_snapshot(Path(path).read_bytes())


# ------------------------------------------------------------- current holder


class SnapshotStore:
    """Atomic (full, delta) pair swap; snapshots themselves are immutable."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._full: FullSnapshot | None = None
        self._delta: DeltaSnapshot | None = None

    def publish_full(self, snapshot: FullSnapshot) -> None:
        with self._lock:
            self._full = snapshot
            self._delta = None  # old deltas pair with the old full

    def publish_delta(self, snapshot: DeltaSnapshot) -> None:
        with self._lock:
            if self._full is None or snapshot.paired_full_id != self._full.snapshot_id:
                raise ConsistencyError("delta does not pair with the current full snapshot")
            self._delta = snapshot

    def current(self) -> tuple[FullSnapshot | None, DeltaSnapshot | None]:
        with self._lock:
            return self._full, self._delta
