import math

import numpy as np
import pytest

from mfli.config import CorpusConfig
from mfli.corpus import (
    CorpusTable,
    EngagementEvent,
    event_arrays,
    generate_corpus,
    generate_events,
    num_fresh_items,
    read_events,
    read_items,
    split_train_eval,
    write_events,
    write_items,
)
from mfli.errors import ConfigError


def small_config(**overrides) -> CorpusConfig:
    base = dict(
        num_items=500,
        num_t1_topics=4,
        num_t2_per_t1=4,
        num_events=2000,
        topic_affinity=0.7,
        fresh_item_rate=0.0,
        seed=7,
    )
    base.update(overrides)
    return CorpusConfig(**base)


def test_single_item_corpus_gets_only_possible_topics():
    cfg = CorpusConfig(
        num_items=1, num_t1_topics=1, num_t2_per_t1=1, num_events=10,
        fresh_item_rate=0.0, seed=0,
    )
    (item,) = generate_corpus(cfg)
    assert item.t1_topic == 0
    assert item.t2_topic == 0
    assert item.created_at == 0


def test_same_seed_gives_identical_corpus_and_events():
    cfg = small_config()
    a = generate_corpus(cfg)
    b = generate_corpus(cfg)
    assert a == b
    ev_a = generate_events(a, cfg)
    ev_b = generate_events(b, cfg)
    assert ev_a == ev_b


def test_different_seed_changes_corpus():
    a = generate_corpus(small_config(seed=1))
    b = generate_corpus(small_config(seed=2))
    assert a != b


def test_topic_counts_within_three_sigma_of_multinomial():
    cfg = CorpusConfig(
        num_items=10_000, num_t1_topics=8, num_t2_per_t1=8, num_events=10,
        fresh_item_rate=0.0, seed=11,
    )
    items = generate_corpus(cfg)
    counts = np.bincount([it.t2_topic for it in items], minlength=64)
    p = 1.0 / 64
    mean = cfg.num_items * p
    sigma = math.sqrt(cfg.num_items * p * (1 - p))
    assert counts.sum() == cfg.num_items
    assert np.all(np.abs(counts - mean) <= 3 * sigma)
    for it in items:
        assert it.t1_topic == it.t2_topic // cfg.num_t2_per_t1


def test_affinity_one_forces_shared_t2():
    cfg = small_config(topic_affinity=1.0, num_events=1000)
    items = generate_corpus(cfg)
    t2_of = {it.item_id: it.t2_topic for it in items}
    for ev in generate_events(items, cfg):
        assert t2_of[ev.trigger_id] == t2_of[ev.candidate_id]
        assert ev.trigger_id != ev.candidate_id


def test_affinity_zero_share_rate_near_uniform():
    cfg = CorpusConfig(
        num_items=10_000, num_t1_topics=8, num_t2_per_t1=8, num_events=100_000,
        topic_affinity=0.0, fresh_item_rate=0.0, seed=3,
    )
    items = generate_corpus(cfg)
    t2_of = {it.item_id: it.t2_topic for it in items}
    events = generate_events(items, cfg)
    rate = sum(t2_of[e.trigger_id] == t2_of[e.candidate_id] for e in events) / len(events)
    p = 1.0 / 64
    sigma = math.sqrt(p * (1 - p) / len(events))
    assert abs(rate - p) <= 3 * sigma


def test_affinity_calibration_formula():
    # Empirical same-t2 rate converges to a + (1 - a) / num_t2.
    cfg = CorpusConfig(
        num_items=10_000, num_t1_topics=8, num_t2_per_t1=8, num_events=100_000,
        topic_affinity=0.7, fresh_item_rate=0.0, seed=5,
    )
    items = generate_corpus(cfg)
    t2_of = {it.item_id: it.t2_topic for it in items}
    events = generate_events(items, cfg)
    rate = sum(t2_of[e.trigger_id] == t2_of[e.candidate_id] for e in events) / len(events)
    expected = 0.7 + 0.3 / 64
    sigma = math.sqrt(expected * (1 - expected) / len(events))
    assert abs(rate - expected) <= 3 * sigma


def test_label_rule_two_facets():
    cfg = small_config(num_events=500)
    items = generate_corpus(cfg)
    t2_of = {it.item_id: it.t2_topic for it in items}
    for ev in generate_events(items, cfg, num_facets=2):
        assert len(ev.labels) == 2
        if t2_of[ev.trigger_id] == t2_of[ev.candidate_id]:
            assert ev.labels == (1.0, 1.0)
        else:
            assert ev.labels == (1.0, 0.0)


def test_label_shape_follows_facet_count():
    cfg = small_config(num_events=50)
    items = generate_corpus(cfg)
    for f in (1, 3):
        for ev in generate_events(items, cfg, num_facets=f):
            assert len(ev.labels) == f
            assert ev.labels[0] == 1.0


def test_timestamps_are_event_indices():
    cfg = small_config(num_events=100)
    events = generate_events(generate_corpus(cfg), cfg)
    assert [e.timestamp for e in events] == list(range(100))


def test_events_respect_created_at():
    cfg = small_config(
        num_items=50, num_events=400, fresh_item_rate=0.5, boundary_tick=200
    )
    items = generate_corpus(cfg)
    created = {it.item_id: it.created_at for it in items}
    assert num_fresh_items(cfg) == 48  # capped at num_items - 2
    assert any(it.created_at > 200 for it in items)
    for ev in generate_events(items, cfg):
        assert created[ev.trigger_id] <= ev.timestamp
        assert created[ev.candidate_id] <= ev.timestamp


def test_fresh_items_appear_after_boundary_at_rate():
    cfg = small_config(num_items=500, num_events=1000, fresh_item_rate=0.1,
                       boundary_tick=500)
    items = generate_corpus(cfg)
    fresh = [it for it in items if it.created_at > 0]
    assert len(fresh) == 50  # 0.1 items per tick over 500 ticks
    assert all(500 < it.created_at < 1000 for it in fresh)
    # one item every 10 ticks
    gaps = np.diff(sorted(it.created_at for it in fresh))
    assert np.all(gaps == 10)


def test_split_train_eval_boundaries():
    evs = [EngagementEvent(0, 1, (1.0,), ts) for ts in (1, 5, 9)]
    train, ev = split_train_eval(evs, 0)
    assert train == [] and ev == evs
    train, ev = split_train_eval(evs, 100)
    assert train == evs and ev == []
    train, ev = split_train_eval(evs, 5)
    assert [e.timestamp for e in train] == [1]
    assert [e.timestamp for e in ev] == [5, 9]


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        generate_events([], small_config())


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        generate_corpus(small_config(num_items=0))
    with pytest.raises(ConfigError):
        generate_corpus(small_config(topic_affinity=1.5))


def test_jsonl_round_trip(tmp_path):
    cfg = small_config(num_events=200)
    items = generate_corpus(cfg)
    events = generate_events(items, cfg)
    write_items(tmp_path / "items.jsonl", items)
    write_events(tmp_path / "events.jsonl", events)
    assert read_items(tmp_path / "items.jsonl") == items
    assert read_events(tmp_path / "events.jsonl") == events
    first = (tmp_path / "items.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {
        "item_id", "t1_topic", "t2_topic", "created_at",
    }


def test_corpus_table_and_event_arrays():
    cfg = small_config(num_events=300)
    items = generate_corpus(cfg)
    events = generate_events(items, cfg)
    table = CorpusTable.from_items(items)
    assert len(table) == len(items)
    for it in items[:20]:
        row = table.row_of[it.item_id]
        assert table.t2[row] == it.t2_topic
    trig, cand, labels, ts = event_arrays(events)
    assert trig.shape == (300,) and labels.shape == (300, 2)
    assert labels.dtype == np.float32
    assert np.all(trig != cand)
    assert np.all(np.diff(ts) == 1)
