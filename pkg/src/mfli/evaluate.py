"""Evaluation harness: recall, topic relevance, index statistics, throughput.

Retrieval quality is judged against two references computed with the same
embeddings: an exact brute-force scan (upper bound) and the analytic
random baseline k / pool. run_pipeline chains corpus generation, training,
snapshot publishing and evaluation into one deterministic report.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .corpus import (
    CorpusTable,
    EngagementEvent,
    Item,
    generate_corpus,
    generate_events,
    split_train_eval,
)
from .errors import ConfigError, StageError
from .index_store import (
    FullSnapshot,
    publish_delta_snapshot,
    publish_full_snapshot,
)
from .rebalance import SizeBounds
from .rng import EVAL_STREAM, spawn_rng
from .serving import Retriever
from .training import train


# -------------------------------------------------------------------- oracles


def brute_force_topk(
    query: np.ndarray,
    pool_embeddings: np.ndarray,
    k: int,
    facet: int,
    ids: np.ndarray | None = None,
) -> np.ndarray:
    """Exact top-k by dot product on one facet; ties break to the lower id."""
    if k <= 0:
        raise ConfigError("k must be > 0")
    pool = np.asarray(pool_embeddings)
    if pool.ndim != 3 or pool.shape[0] == 0:
        raise ConfigError("pool_embeddings must be a non-empty (I, F, d) array")
    if not 0 <= facet < pool.shape[1]:
        raise ConfigError(f"facet {facet} out of range")
    ids = np.arange(pool.shape[0]) if ids is None else np.asarray(ids)
    scores = pool[:, facet, :].astype(np.float64) @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((ids, -scores))[: min(k, len(ids))]
    return ids[order]


def brute_force_retrieve(
    query_vectors: np.ndarray,
    pool_embeddings: np.ndarray,
    k: int,
    ids: np.ndarray | None = None,
) -> np.ndarray:
    """Exact top-k where each item scores on its best-matching facet.

    Mirrors the serving scorer: retrieval can reach an item through any
    facet and deduplication keeps the best occurrence.
    """
    if k <= 0:
        raise ConfigError("k must be > 0")
    pool = np.asarray(pool_embeddings)
    ids = np.arange(pool.shape[0]) if ids is None else np.asarray(ids)
    queries = np.asarray(query_vectors, dtype=np.float64)
    scores = np.einsum("ifd,fd->if", pool.astype(np.float64), queries).max(axis=1)
    order = np.lexsort((ids, -scores))[: min(k, len(ids))]
    return ids[order]


def recall_at_k(retrieved, ground_truth) -> float | None:
    """|retrieved & truth| / |truth|; empty truth is undefined (None)."""
    truth = set(int(g) for g in ground_truth)
    if not truth:
        return None
    got = set(int(r) for r in retrieved)
    return len(got & truth) / len(truth)


def topic_match_rate(
    pairs, level: str, topics: dict[int, tuple[int, int]]
) -> tuple[float, int]:
    """Fraction of (trigger, retrieved) pairs sharing the topic at a level.

    Returns (rate over known pairs, skipped pair count). Level "t1" or "t2".
    """
    if level not in ("t1", "t2"):
        raise ConfigError(f"unknown topic level {level!r}")
    pos = 0 if level == "t1" else 1
    matches = 0
    known = 0
    skipped = 0
    for trigger, item in pairs:
        a = topics.get(int(trigger))
        b = topics.get(int(item))
        if a is None or b is None:
            skipped += 1
            continue
        known += 1
        matches += int(a[pos] == b[pos])
    return (matches / known if known else 0.0), skipped


# ----------------------------------------------------------- index relevance


def _facet_segments(full: FullSnapshot, facet: int) -> list[np.ndarray]:
    """Non-empty valid segments of one facet, as id arrays."""
    index_map = full.index_to_item
    base = int(index_map.slot_offsets[facet])
    segments = []
    for local in range(full.merged_counts[facet]):
        start = int(index_map.prefix[base + local])
        stop = int(index_map.prefix[base + local + 1])
        if stop > start:
            segments.append(index_map.items[start:stop])
    return segments


def index_relevance(
    full: FullSnapshot,
    table: CorpusTable,
    samples: int,
    rng: np.random.Generator,
    facet: int = 0,
) -> tuple[float, float]:
    """T2 match rate over same-index item pairs vs cross-index pairs."""
    segments = _facet_segments(full, facet)
    eligible = [s for s in segments if len(s) >= 2]
    if not eligible or len(segments) < 2:
        raise ConfigError("snapshot too small for relevance sampling")

    def t2_of(item: int) -> int:
        return int(table.t2[table.row_of[int(item)]])

    intra = 0
    for _ in range(samples):
        seg = eligible[int(rng.integers(len(eligible)))]
        a, b = rng.choice(len(seg), size=2, replace=False)
        intra += int(t2_of(seg[a]) == t2_of(seg[b]))
    inter = 0
    for _ in range(samples):
        i, j = rng.choice(len(segments), size=2, replace=False)
        a = segments[i][int(rng.integers(len(segments[i])))]
        b = segments[j][int(rng.integers(len(segments[j])))]
        inter += int(t2_of(a) == t2_of(b))
    return intra / samples, inter / samples


# -------------------------------------------------------------- index stats


@dataclass
class IndexStats:
    size_histogram: list[dict[int, int]]      # per facet: size -> index count
    items_by_size: list[dict[int, int]]       # per facet: size -> item count
    usage_ratio: list[float]                  # non-empty / valid fine indices
    original_usage_ratio: list[float]         # covered originals / tuple space


def index_stats(full: FullSnapshot) -> IndexStats:
    histograms: list[dict[int, int]] = []
    items_by_size: list[dict[int, int]] = []
    usage: list[float] = []
    original_usage: list[float] = []
    counts = full.index_to_item.counts
    for facet in range(full.num_facets):
        base = int(full.index_to_item.slot_offsets[facet])
        merged = full.merged_counts[facet]
        sizes = counts[base : base + merged]  # invalid slot excluded
        hist: dict[int, int] = {}
        weighted: dict[int, int] = {}
        for size in sizes:
            size = int(size)
            hist[size] = hist.get(size, 0) + 1
            weighted[size] = weighted.get(size, 0) + size
        histograms.append(hist)
        items_by_size.append(weighted)
        non_empty = int((sizes > 0).sum())
        usage.append(non_empty / merged if merged else 0.0)
        covered: set[int] = set()
        for local in np.nonzero(sizes > 0)[0]:
            covered |= full.remap[facet][int(local)]
        original_usage.append(len(covered) / full.tuple_count)
    return IndexStats(histograms, items_by_size, usage, original_usage)


# --------------------------------------------------------------- throughput


@dataclass
class ThroughputResult:
    mfli_qps: float
    brute_qps: float
    ratio: float
    mfli_queries: int
    brute_queries: int


def generate_requests(
    rng: np.random.Generator,
    candidate_ids: np.ndarray,
    num_requests: int,
    triggers_per_request: int,
) -> list[list[int]]:
    ids = np.asarray(candidate_ids)
    return [
        [int(v) for v in rng.choice(ids, size=triggers_per_request, replace=False)]
        for _ in range(num_requests)
    ]


def throughput_bench(
    retriever: Retriever,
    requests: list[list[int]],
    k: int,
    duration: float,
) -> ThroughputResult:
    """Wall-clock QPS of the indexed path vs an exact scan, same requests."""
    if duration <= 0:
        raise ConfigError("duration must be > 0")
    if not requests:
        raise ConfigError("need at least one request")

    count = 0
    start = time.perf_counter()
    while True:
        retriever.retrieve(requests[count % len(requests)], seed=count)
        count += 1
        elapsed = time.perf_counter() - start
        if elapsed >= duration and count >= len(requests):
            break
    mfli_qps = count / elapsed

    pool_ids = retriever.pool_ids
    pool_emb = retriever.pool_embeddings
    brute_count = 0
    start = time.perf_counter()
    while True:
        triggers = requests[brute_count % len(requests)]
        query_vectors = retriever.embed_candidates(np.asarray(triggers)).mean(axis=0)
        brute_force_retrieve(query_vectors, pool_emb, k, pool_ids)
        brute_count += 1
        brute_elapsed = time.perf_counter() - start
        if brute_elapsed >= duration and brute_count >= 1:
            break
    brute_qps = brute_count / brute_elapsed
    return ThroughputResult(
        mfli_qps, brute_qps, mfli_qps / brute_qps, count, brute_count
    )


# ------------------------------------------------------------------ pipeline


@dataclass
class EvalReport:
    seed: int
    config: dict
    recall_engagement: float
    recall_brute_force: float
    recall_random_baseline: float
    recall_cold: float | None
    t1_match_rate: float
    t2_match_rate: float
    intra_index_relevance: float
    inter_index_relevance: float
    index_size_histogram: list[dict[int, int]]
    index_usage_ratio: list[float]
    original_usage_ratio: list[float]
    throughput_qps: float
    evaluated_triggers: int
    skipped_trigger_lookups: int
    pool_size: int
    fresh_count: int
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        doc = {
            k: v
            for k, v in self.__dict__.items()
            if k not in ("history", "index_size_histogram")
        }
        doc["index_size_histogram"] = [
            {str(size): count for size, count in sorted(h.items())}
            for h in self.index_size_histogram
        ]
        return doc


def _truncate_topk(result_items, k: int) -> list[int]:
    ranked = sorted(result_items, key=lambda r: (-r.score, r.item_id))
    return [r.item_id for r in ranked[:k]]


@dataclass
class PipelineArtifacts:
    """Intermediate products of run_pipeline, useful for inspection and tests."""

    items: list[Item]
    events: list[EngagementEvent]
    checkpoint: object
    full: FullSnapshot
    delta: object
    retriever: Retriever
    report: EvalReport


def run_pipeline(
    config: Config,
    out_dir: str | Path | None = None,
    keep_artifacts: bool = False,
    bench_duration: float = 0.0,
) -> EvalReport | PipelineArtifacts:
    """gen -> train -> publish full + delta -> evaluate, one seed end to end."""
    config.validate()
    seed = config.corpus.seed

    stage = "gen"
    try:
        items = generate_corpus(config.corpus)
        events = generate_events(items, config.corpus, config.training.num_facets)
        boundary = config.corpus.resolved_boundary
        train_events, eval_events = split_train_eval(events, boundary)

        stage = "train"
        checkpoint, history = train(
            items, train_events, config.training, config.codebook, seed
        )

        stage = "publish"
        lower, upper = config.bounds.resolved()
        bounds = SizeBounds(lower, upper)
        pool_ids = [it.item_id for it in items if it.created_at <= boundary]
        fresh_ids = [it.item_id for it in items if it.created_at > boundary]
        full = publish_full_snapshot(checkpoint, pool_ids, bounds, tick=boundary)
        delta = publish_delta_snapshot(
            checkpoint, fresh_ids, tick=config.corpus.num_events, full=full
        )

        stage = "eval"
        retriever = Retriever(full, delta, checkpoint, config.selection)
        report = _evaluate(
            config, seed, items, eval_events, retriever, full,
            pool_ids, fresh_ids, history, bench_duration,
        )
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    if out_dir is not None:
        write_report(report, out_dir)
    if keep_artifacts:
        return PipelineArtifacts(
            items, events, checkpoint, full, delta, retriever, report
        )
    return report


def _evaluate(
    config: Config,
    seed: int,
    items: list[Item],
    eval_events: list[EngagementEvent],
    retriever: Retriever,
    full: FullSnapshot,
    pool_ids: list[int],
    fresh_ids: list[int],
    history: list[float],
    bench_duration: float,
) -> EvalReport:
    table = CorpusTable.from_items(items)
    topics = {
        int(i): (int(t1), int(t2))
        for i, t1, t2 in zip(table.ids, table.t1, table.t2)
    }
    k = config.eval.recall_k
    rng = spawn_rng(seed, EVAL_STREAM)

    truth: dict[int, set[int]] = {}
    for ev in eval_events:
        truth.setdefault(ev.trigger_id, set()).add(ev.candidate_id)
    known = set(int(i) for i in retriever.pool_ids)
    triggers = sorted(t for t in truth if t in known)
    if len(triggers) > config.eval.max_eval_triggers:
        chosen = rng.choice(len(triggers), size=config.eval.max_eval_triggers,
                            replace=False)
        triggers = [triggers[i] for i in sorted(chosen)]

    universe_ids = np.concatenate([retriever.pool_ids, retriever.delta_ids])
    universe_emb = np.concatenate(
        [retriever.pool_embeddings, retriever.delta_embeddings]
    )
    fresh_set = set(int(i) for i in fresh_ids)

    mfli_recalls: list[float] = []
    brute_recalls: list[float] = []
    cold_recalls: list[float] = []
    pairs: list[tuple[int, int]] = []
    skipped_lookups = 0
    for trigger in triggers:
        result = retriever.retrieve([trigger], seed=int(trigger))
        skipped_lookups += result.skipped_triggers
        retrieved = _truncate_topk(result.items, k)
        r = recall_at_k(retrieved, truth[trigger])
        if r is not None:
            mfli_recalls.append(r)
        query_vectors = retriever.embed_candidates(np.array([trigger]))[0]
        brute = brute_force_retrieve(query_vectors, universe_emb, k, universe_ids)
        rb = recall_at_k(brute, truth[trigger])
        if rb is not None:
            brute_recalls.append(rb)
        cold_truth = truth[trigger] & fresh_set
        rc = recall_at_k(retrieved, cold_truth)
        if rc is not None:
            cold_recalls.append(rc)
        pairs.extend((trigger, item) for item in retrieved)

    t1_rate, _ = topic_match_rate(pairs, "t1", topics)
    t2_rate, _ = topic_match_rate(pairs, "t2", topics)
    intra, inter = index_relevance(
        full, table, config.eval.relevance_samples, rng
    )
    stats = index_stats(full)

    qps = 0.0
    if bench_duration > 0 and config.eval.bench_requests > 0:
        requests = generate_requests(
            rng, retriever.pool_ids, config.eval.bench_requests,
            config.eval.bench_triggers_per_request,
        )
        start = time.perf_counter()
        for i, req in enumerate(requests):
            retriever.retrieve(req, seed=i)
        qps = len(requests) / (time.perf_counter() - start)

    pool_size = len(universe_ids)
    return EvalReport(
        seed=seed,
        config=config.to_dict(),
        recall_engagement=float(np.mean(mfli_recalls)) if mfli_recalls else 0.0,
        recall_brute_force=float(np.mean(brute_recalls)) if brute_recalls else 0.0,
        recall_random_baseline=k / pool_size if pool_size else 0.0,
        recall_cold=float(np.mean(cold_recalls)) if cold_recalls else None,
        t1_match_rate=t1_rate,
        t2_match_rate=t2_rate,
        intra_index_relevance=intra,
        inter_index_relevance=inter,
        index_size_histogram=stats.size_histogram,
        index_usage_ratio=stats.usage_ratio,
        original_usage_ratio=stats.original_usage_ratio,
        throughput_qps=qps,
        evaluated_triggers=len(triggers),
        skipped_trigger_lookups=skipped_lookups,
        pool_size=len(pool_ids),
        fresh_count=len(fresh_ids),
        history=history,
    )


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    """report.json single record plus a CSV per histogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "index_size_hist.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["facet", "size", "num_indices"])
        for facet, hist in enumerate(report.index_size_histogram):
            for size in sorted(hist):
                writer.writerow([facet, size, hist[size]])
