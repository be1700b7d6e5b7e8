import numpy as np
import pytest

from mfli.config import (
    BoundsConfig,
    CodebookConfig,
    Config,
    CorpusConfig,
    EvalConfig,
    SelectionConfig,
    TrainingConfig,
)
from mfli.corpus import CorpusTable, Item
from mfli.errors import ConfigError, StageError
from mfli.evaluate import (
    EvalReport,
    brute_force_retrieve,
    brute_force_topk,
    generate_requests,
    index_relevance,
    index_stats,
    recall_at_k,
    run_pipeline,
    throughput_bench,
    topic_match_rate,
    write_report,
)
from mfli.index_store import publish_full_snapshot
from mfli.rebalance import SizeBounds
from mfli.serving import Retriever
from tests.test_index_store import make_checkpoint
from tests.test_serving import build_full


# -------------------------------------------------------------- brute force


def test_brute_force_unit_vectors():
    pool = np.zeros((3, 1, 3), dtype=np.float32)
    pool[0, 0, 0] = 1.0
    pool[1, 0, 1] = 1.0
    pool[2, 0, 2] = 1.0
    got = brute_force_topk(np.array([0.0, 1.0, 0.0]), pool, 1, facet=0)
    assert got.tolist() == [1]


def test_brute_force_full_sort_and_oracle():
    g = np.random.default_rng(0)
    pool = g.normal(size=(1000, 2, 8)).astype(np.float32)
    query = g.normal(size=8)
    got = brute_force_topk(query, pool, 10, facet=1)
    scores = pool[:, 1, :].astype(np.float64) @ query
    oracle = sorted(range(1000), key=lambda i: (-scores[i], i))[:10]
    assert got.tolist() == oracle
    everything = brute_force_topk(query, pool, 1000, facet=1)
    assert len(everything) == 1000
    assert scores[everything[0]] == scores.max()


def test_brute_force_ties_and_errors():
    pool = np.ones((4, 1, 2), dtype=np.float32)
    ids = np.array([9, 2, 7, 4])
    got = brute_force_topk(np.array([1.0, 1.0]), pool, 2, 0, ids)
    assert got.tolist() == [2, 4]
    with pytest.raises(ConfigError):
        brute_force_topk(np.array([1.0, 1.0]), pool, 0, 0)
    with pytest.raises(ConfigError):
        brute_force_topk(np.array([1.0]), np.zeros((0, 1, 1)), 1, 0)


def test_brute_force_retrieve_uses_best_facet():
    pool = np.zeros((2, 2, 2), dtype=np.float32)
    pool[0, 0] = [1.0, 0.0]   # strong on facet 0
    pool[1, 1] = [0.0, 2.0]   # stronger on facet 1
    queries = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = brute_force_retrieve(queries, pool, 2)
    assert got.tolist() == [1, 0]  # scores 2.0 vs 1.0


# ------------------------------------------------------------------- recall


def test_recall_examples():
    assert recall_at_k([1, 2, 3], [1, 2]) == 1.0
    assert recall_at_k([5, 6], [1, 2]) == 0.0
    assert recall_at_k([1, 3, 9], [1, 2, 3, 4]) == 0.5
    assert recall_at_k([1], []) is None


def test_recall_monotone_in_k():
    g = np.random.default_rng(1)
    ranked = g.permutation(100)
    truth = set(g.choice(100, size=20, replace=False).tolist())
    rates = [recall_at_k(ranked[:k], truth) for k in (5, 20, 50, 100)]
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    assert rates[-1] == 1.0


# -------------------------------------------------------------- topic match


TOPICS = {1: (0, 0), 2: (0, 0), 3: (0, 1), 4: (1, 4), 5: (1, 5)}


def test_topic_match_same_t2_implies_t1():
    pairs = [(1, 2), (2, 1)]
    assert topic_match_rate(pairs, "t1", TOPICS) == (1.0, 0)
    assert topic_match_rate(pairs, "t2", TOPICS) == (1.0, 0)


def test_topic_match_disjoint():
    pairs = [(1, 4), (3, 5)]
    assert topic_match_rate(pairs, "t1", TOPICS)[0] == 0.0
    assert topic_match_rate(pairs, "t2", TOPICS)[0] == 0.0


def test_topic_match_hand_counts():
    # 4 pairs: 2 match t1, of which 1 matches t2
    pairs = [(1, 2), (1, 3), (1, 4), (4, 1)]
    assert topic_match_rate(pairs, "t1", TOPICS)[0] == 0.5
    assert topic_match_rate(pairs, "t2", TOPICS)[0] == 0.25


def test_topic_match_skips_unknown():
    rate, skipped = topic_match_rate([(1, 2), (1, 99)], "t1", TOPICS)
    assert rate == 1.0 and skipped == 1
    with pytest.raises(ConfigError):
        topic_match_rate([], "t3", TOPICS)


# ---------------------------------------------------------- index relevance


def pure_world():
    # 3 indices x 4 items, t2 equals the index
    fine = np.repeat(np.arange(3), 4)
    full = build_full(fine, merged=3, remap_sets=[{0}, {1}, {2}])
    ids = full.assignments.ids
    items = [Item(int(i), 0, int(fine[r]), 0) for r, i in enumerate(ids)]
    return full, CorpusTable.from_items(items)


def test_index_relevance_pure_indices():
    full, table = pure_world()
    intra, inter = index_relevance(full, table, 400, np.random.default_rng(0))
    assert intra == 1.0
    assert inter == 0.0


def test_index_relevance_null_model_within_noise():
    g = np.random.default_rng(2)
    count, topics, indices = 3000, 8, 50
    fine = g.integers(0, indices, size=count)
    full = build_full(fine, merged=indices, remap_sets=[{m} for m in range(indices)])
    items = [
        Item(int(i), 0, int(g.integers(0, topics)), 0) for i in full.assignments.ids
    ]
    table = CorpusTable.from_items(items)
    samples = 4000
    intra, inter = index_relevance(full, table, samples, np.random.default_rng(3))
    p = 1 / topics
    sigma_gap = np.sqrt(2 * p * (1 - p) / samples)
    assert abs(intra - inter) <= 3 * sigma_gap


def test_index_relevance_skips_singletons():
    fine = np.array([0, 0, 1, 2, 2])  # index 1 has a single item
    full = build_full(fine, merged=3, remap_sets=[{0}, {1}, {2}])
    items = [Item(int(i), 0, 0, 0) for i in full.assignments.ids]
    intra, _ = index_relevance(
        full, CorpusTable.from_items(items), 100, np.random.default_rng(0)
    )
    assert intra == 1.0  # singleton index never sampled for intra


# ---------------------------------------------------------------- stats


def test_index_stats_empty():
    full = build_full(np.zeros((0,), dtype=np.int64), merged=4,
                      remap_sets=[{0}, {1}, {2}, {3}], ids=[])
    stats = index_stats(full)
    assert stats.usage_ratio == [0.0]
    assert stats.size_histogram == [{0: 4}]


def test_index_stats_uniform():
    fine = np.repeat(np.arange(64), 10)
    full = build_full(fine, merged=64, remap_sets=[{m} for m in range(64)],
                      layer_sizes=(8, 8))
    stats = index_stats(full)
    assert stats.size_histogram == [{10: 64}]
    assert stats.usage_ratio == [1.0]
    assert stats.original_usage_ratio == [1.0]
    assert sum(stats.items_by_size[0].values()) == 640


def test_index_stats_matches_group_by():
    g = np.random.default_rng(4)
    fine = (g.zipf(1.3, size=2000) - 1) % 32
    full = build_full(fine, merged=32, remap_sets=[{m} for m in range(32)],
                      layer_sizes=(8, 4))
    stats = index_stats(full)
    oracle: dict[int, int] = {}
    counts = np.bincount(fine, minlength=32)
    for c in counts:
        oracle[int(c)] = oracle.get(int(c), 0) + 1
    assert stats.size_histogram[0] == oracle
    assert stats.usage_ratio[0] == float((counts > 0).mean())


# ------------------------------------------------------------- throughput


def test_generate_requests_deterministic():
    ids = np.arange(100)
    a = generate_requests(np.random.default_rng(5), ids, 10, 4)
    b = generate_requests(np.random.default_rng(5), ids, 10, 4)
    assert a == b
    assert all(len(set(r)) == 4 for r in a)


def test_throughput_bench_smoke():
    ckpt = make_checkpoint(num_items=200, num_facets=2, dim=8, layer_sizes=(4, 2))
    full = publish_full_snapshot(ckpt, range(200), SizeBounds(2, 120), tick=0)
    retriever = Retriever(full, None, ckpt, SelectionConfig(k_total=4, top_n=5))
    requests = generate_requests(np.random.default_rng(0), np.arange(200), 5, 3)
    result = throughput_bench(retriever, requests, k=10, duration=0.05)
    assert result.mfli_qps > 0 and result.brute_qps > 0
    assert result.ratio == pytest.approx(result.mfli_qps / result.brute_qps)
    assert result.mfli_queries >= len(requests)
    with pytest.raises(ConfigError):
        throughput_bench(retriever, requests, k=10, duration=0.0)
    with pytest.raises(ConfigError):
        throughput_bench(retriever, [], k=10, duration=1.0)


# --------------------------------------------------------------- pipeline


def smoke_config(seed=0, num_facets=2):
    return Config(
        corpus=CorpusConfig(
            num_items=1000, num_t1_topics=4, num_t2_per_t1=4,
            num_events=3000, topic_affinity=0.8, fresh_item_rate=0.05, seed=seed,
        ),
        training=TrainingConfig(
            num_facets=num_facets, dim=16, batch_size=128, num_negatives=32,
            epochs=2, warmup_steps=4, layer_activation=[4, 8],
        ),
        codebook=CodebookConfig(layer_sizes=[8, 4]),
        bounds=BoundsConfig(lower=2, upper=60),
        selection=SelectionConfig(k_total=20, top_n=10),
        eval=EvalConfig(recall_k=20, max_eval_triggers=60, relevance_samples=400,
                        bench_requests=0),
    )


@pytest.fixture(scope="module")
def smoke_report():
    return run_pipeline(smoke_config())


def test_pipeline_populates_report(smoke_report):
    r = smoke_report
    assert isinstance(r, EvalReport)
    assert 0.0 <= r.recall_engagement <= 1.0
    assert 0.0 <= r.recall_brute_force <= 1.0
    assert 0.0 < r.recall_random_baseline < 1.0
    assert 0.0 <= r.t1_match_rate <= 1.0
    assert 0.0 <= r.t2_match_rate <= 1.0
    assert 0.0 <= r.intra_index_relevance <= 1.0
    assert 0.0 <= r.inter_index_relevance <= 1.0
    assert r.evaluated_triggers > 0
    assert r.pool_size + r.fresh_count == 1000
    assert len(r.index_usage_ratio) == 2
    # histogram accounts for every pooled item (invalid slots excluded)
    for facet in range(2):
        total = sum(size * n for size, n in r.index_size_histogram[facet].items())
        assert total <= r.pool_size


def test_pipeline_deterministic(smoke_report):
    again = run_pipeline(smoke_config())
    assert again.recall_engagement == smoke_report.recall_engagement
    assert again.recall_brute_force == smoke_report.recall_brute_force
    assert again.t2_match_rate == smoke_report.t2_match_rate
    assert again.index_size_histogram == smoke_report.index_size_histogram


def test_pipeline_writes_report_files(tmp_path, smoke_report):
    write_report(smoke_report, tmp_path)
    report = (tmp_path / "report.json").read_text()
    assert "recall_engagement" in report
    table = (tmp_path / "index_size_hist.csv").read_text().splitlines()
    assert table[0] == "facet,size,num_indices"
    assert len(table) > 1


def test_pipeline_tags_stage_failures():
    config = smoke_config()
    config.corpus.num_items = 6  # too few items to seed an 8-codeword layer
    config.corpus.num_events = 50
    with pytest.raises(StageError) as err:
        run_pipeline(config)
    assert err.value.stage == "train"
