"""Synthetic item corpus and co-engagement event stream.

Items carry a balanced two-level topic hierarchy (t1 -> t2). Events are
topic-biased trigger/candidate pairs on an integer-tick timeline; an item
can appear in an event only from its created_at tick onward.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CorpusConfig
from .errors import ConfigError
from .rng import CORPUS_STREAM, EVENT_STREAM, spawn_rng


@dataclass(frozen=True, slots=True)
class Item:
    item_id: int
    t1_topic: int
    t2_topic: int
    created_at: int


@dataclass(frozen=True, slots=True)
class EngagementEvent:
    trigger_id: int
    candidate_id: int
    labels: tuple[float, ...]
    timestamp: int


def num_fresh_items(config: CorpusConfig) -> int:
    """Items reserved to appear after the boundary at fresh_item_rate per tick."""
    window = config.num_events - config.resolved_boundary
    if window <= 0 or config.fresh_item_rate <= 0:
        return 0
    fresh = int(config.fresh_item_rate * window)
    # Keep at least two base items so tick-0 events can form a pair.
    return min(fresh, max(config.num_items - 2, 0))


def generate_corpus(config: CorpusConfig) -> list[Item]:
    config.validate()
    rng = spawn_rng(config.seed, CORPUS_STREAM)
    num_t2 = config.num_t2_topics
    t2 = rng.integers(0, num_t2, size=config.num_items)
    created = np.zeros(config.num_items, dtype=np.int64)
    fresh = num_fresh_items(config)
    if fresh > 0:
        boundary = config.resolved_boundary
        ticks = boundary + 1 + (np.arange(fresh) / config.fresh_item_rate).astype(np.int64)
        created[config.num_items - fresh:] = np.minimum(ticks, config.num_events - 1)
    per_t1 = config.num_t2_per_t1
    return [
        Item(i, int(t2[i]) // per_t1, int(t2[i]), int(created[i]))
        for i in range(config.num_items)
    ]


def generate_events(
    corpus: list[Item], config: CorpusConfig, num_facets: int = 2
) -> list[EngagementEvent]:
    """Timestamp of event e is e itself; pairs only use items already created.

    With probability topic_affinity the candidate is drawn uniformly from the
    trigger's t2 topic, else the pair is uniform over available items. Facet 1
    is labeled 1 always; every later facet is labeled 1 iff the pair shares t2.
    """
    if not corpus:
        raise ConfigError("corpus is empty")
    if num_facets <= 0:
        raise ConfigError("num_facets must be > 0")
    config.validate()
    rng = spawn_rng(config.seed, EVENT_STREAM)
    total = config.num_events

    arrival = sorted(corpus, key=lambda it: (it.created_at, it.item_id))
    t2_of = {it.item_id: it.t2_topic for it in corpus}
    if len(t2_of) != len(corpus):
        raise ConfigError("duplicate item ids in corpus")

    # Pre-drawn uniforms; int(u * n) is an unbiased index for n << 2**53.
    branch = rng.random(total)
    u_trig = rng.random(total)
    u_cand = rng.random(total)

    avail: list[int] = []
    pos_avail: dict[int, int] = {}
    by_t2: dict[int, list[int]] = defaultdict(list)
    pos_t2: dict[int, int] = {}
    next_arrival = 0

    label_same = (1.0,) * num_facets
    label_diff = (1.0,) + (0.0,) * (num_facets - 1)

    events: list[EngagementEvent] = []
    affinity = config.topic_affinity
    for ts in range(total):
        while next_arrival < len(arrival) and arrival[next_arrival].created_at <= ts:
            it = arrival[next_arrival]
            pos_avail[it.item_id] = len(avail)
            avail.append(it.item_id)
            lst = by_t2[it.t2_topic]
            pos_t2[it.item_id] = len(lst)
            lst.append(it.item_id)
            next_arrival += 1
        n = len(avail)
        if n < 2:
            raise ConfigError(f"fewer than 2 items available at tick {ts}")
        trig = avail[int(u_trig[ts] * n)]
        cand = -1
        if branch[ts] < affinity:
            lst = by_t2[t2_of[trig]]
            m = len(lst)
            if m >= 2:
                cand = lst[(pos_t2[trig] + 1 + int(u_cand[ts] * (m - 1))) % m]
        if cand < 0:
            cand = avail[(pos_avail[trig] + 1 + int(u_cand[ts] * (n - 1))) % n]
        same = t2_of[trig] == t2_of[cand]
        events.append(
            EngagementEvent(trig, cand, label_same if same else label_diff, ts)
        )
    return events


def split_train_eval(
    events: list[EngagementEvent], boundary_tick: int
) -> tuple[list[EngagementEvent], list[EngagementEvent]]:
    """Train window is strictly before the boundary; both halves keep order."""
    train = [e for e in events if e.timestamp < boundary_tick]
    eval_ = [e for e in events if e.timestamp >= boundary_tick]
    return train, eval_


def write_items(path: str | Path, items: list[Item]) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(
                json.dumps(
                    {
                        "item_id": it.item_id,
                        "t1_topic": it.t1_topic,
                        "t2_topic": it.t2_topic,
                        "created_at": it.created_at,
                    }
                )
                + "\n"
            )


def read_items(path: str | Path) -> list[Item]:
    items = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            items.append(
                Item(rec["item_id"], rec["t1_topic"], rec["t2_topic"], rec["created_at"])
            )
    return items


def write_events(path: str | Path, events: list[EngagementEvent]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(
                json.dumps(
                    {
                        "trigger_id": ev.trigger_id,
                        "candidate_id": ev.candidate_id,
                        "labels": list(ev.labels),
                        "timestamp": ev.timestamp,
                    }
                )
                + "\n"
            )


def read_events(path: str | Path) -> list[EngagementEvent]:
    events = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            events.append(
                EngagementEvent(
                    rec["trigger_id"],
                    rec["candidate_id"],
                    tuple(float(x) for x in rec["labels"]),
                    rec["timestamp"],
                )
            )
    return events


@dataclass
class CorpusTable:
    """Column view of a corpus for vectorized metric and serving code."""

    ids: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    created_at: np.ndarray
    row_of: dict[int, int]

    @classmethod
    def from_items(cls, items: list[Item]) -> "CorpusTable":
        ids = np.array([it.item_id for it in items], dtype=np.int64)
        t1 = np.array([it.t1_topic for it in items], dtype=np.int64)
        t2 = np.array([it.t2_topic for it in items], dtype=np.int64)
        created = np.array([it.created_at for it in items], dtype=np.int64)
        row_of = {int(i): r for r, i in enumerate(ids)}
        return cls(ids, t1, t2, created, row_of)

    def __len__(self) -> int:
        return len(self.ids)


def event_arrays(
    events: list[EngagementEvent],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (triggers, candidates, labels (E, F) float32, timestamps)."""
    if not events:
        num_f = 0
        return (
            np.empty(0, np.int64),
            np.empty(0, np.int64),
            np.empty((0, num_f), np.float32),
            np.empty(0, np.int64),
        )
    trig = np.fromiter((e.trigger_id for e in events), np.int64, len(events))
    cand = np.fromiter((e.candidate_id for e in events), np.int64, len(events))
    ts = np.fromiter((e.timestamp for e in events), np.int64, len(events))
    labels = np.array([e.labels for e in events], dtype=np.float32)
    return trig, cand, labels, ts
