import math

import numpy as np
import pytest

from mfli.config import CodebookConfig, CorpusConfig, TrainingConfig
from mfli.corpus import generate_corpus, generate_events, split_train_eval
from mfli.errors import ConfigError, NumericError
from mfli.quantizer import Codebook, DelayedStartSchedule
from mfli.training import (
    AdagradState,
    ItemEmbeddingTable,
    LossWeights,
    TrainBatch,
    joint_loss,
    load_checkpoint,
    relevance_aux_loss,
    sample_negatives,
    save_checkpoint,
    ssm_grad,
    ssm_loss,
    train,
    train_step,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- ssm loss


def test_ssm_loss_all_zero_is_log2():
    z = np.zeros((1, 4))
    assert ssm_loss(z, z, [z], [1.0]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_ssm_loss_zero_weights():
    g = rng(1)
    v = g.normal(size=(2, 4))
    assert ssm_loss(v, v, [g.normal(size=(2, 4))], [0.0, 0.0]) == 0.0


def test_ssm_loss_scalar_hand_value():
    loss = ssm_loss([2.0], [1.0], [[-1.0]], [1.0])
    expected = -math.log(math.exp(2.0) / (math.exp(2.0) + math.exp(-2.0)))
    assert loss == pytest.approx(expected, abs=1e-9)
    assert loss == pytest.approx(0.018150, abs=5e-7)


def test_ssm_loss_non_negative_for_non_negative_weights():
    g = rng(2)
    for _ in range(50):
        vi = g.normal(size=(3, 5))
        vj = g.normal(size=(3, 5))
        negs = g.normal(size=(4, 3, 5))
        w = g.uniform(0, 2, size=3)
        assert ssm_loss(vi, vj, negs, w) >= 0.0


def test_ssm_loss_rejects_bad_input():
    v = np.zeros((1, 4))
    with pytest.raises(ConfigError):
        ssm_loss(v, v, [], [1.0])
    bad = v.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        ssm_loss(bad, v, [v], [1.0])


def test_ssm_loss_facet_independence():
    g = rng(3)
    vi = g.normal(size=(2, 4))
    vj = g.normal(size=(2, 4))
    negs = g.normal(size=(3, 2, 4))
    only_f1 = ssm_loss(vi, vj, negs, [0.0, 1.0])
    vi2 = vi.copy()
    vi2[0] += g.normal(size=4)  # perturb facet 0 only
    assert ssm_loss(vi2, vj, negs, [0.0, 1.0]) == pytest.approx(only_f1, rel=1e-12)


# ------------------------------------------------------------- ssm gradient


def test_ssm_grad_zero_weights():
    g = rng(4)
    vi, vj = g.normal(size=(2, 2, 4))
    negs = g.normal(size=(3, 2, 4))
    gi, gj, gn = ssm_grad(vi, vj, negs, [0.0, 0.0])
    assert not gi.any() and not gj.any() and not gn.any()


def test_ssm_grad_zero_embeddings_candidate_grad():
    z = np.zeros((1, 4))
    _, gj, _ = ssm_grad(z, z, [z], [1.0])
    # (p0 - 1) * v_i with v_i = 0
    assert np.array_equal(gj, np.zeros((1, 4)))


def central_diff(fn, arr, step=1e-4):
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        dn = fn()
        flat[i] = orig
        out[i] = (up - dn) / (2 * step)
    return grad


def test_ssm_grad_matches_finite_differences():
    g = rng(5)
    vi = g.normal(size=(2, 4))
    vj = g.normal(size=(2, 4))
    negs = g.normal(size=(3, 2, 4))
    w = g.uniform(0.2, 1.0, size=2)
    gi, gj, gn = ssm_grad(vi, vj, negs, w)
    fd_i = central_diff(lambda: ssm_loss(vi, vj, negs, w), vi)
    fd_j = central_diff(lambda: ssm_loss(vi, vj, negs, w), vj)
    fd_n = central_diff(lambda: ssm_loss(vi, vj, negs, w), negs)
    for analytic, numeric in ((gi, fd_i), (gj, fd_j), (gn, fd_n)):
        denom = np.maximum(np.abs(numeric), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4


# ---------------------------------------------------------------- joint loss


def test_joint_loss_reduces_to_weighted_raw():
    g = rng(6)
    vi, vj = g.normal(size=(2, 2, 4))
    negs = g.normal(size=(3, 2, 4))
    w = [1.0, 0.5]
    weights = LossWeights(w0=2.0, w_layers=[0.0, 0.0], aux_weight=0.0)
    total = joint_loss(vi, vj, [vj, vj], negs, w, weights, aux=0.0)
    assert total == pytest.approx(2.0 * ssm_loss(vi, vj, negs, w), rel=1e-12)


def test_joint_loss_perfect_quantization():
    g = rng(7)
    vi, vj = g.normal(size=(2, 2, 4))
    negs = g.normal(size=(3, 2, 4))
    w = [1.0, 1.0]
    weights = LossWeights(w0=0.0, w_layers=[1.0], aux_weight=0.0)
    assert joint_loss(vi, vj, [vj], negs, w, weights, 0.0) == pytest.approx(
        ssm_loss(vi, vj, negs, w), rel=1e-12
    )


def test_joint_loss_scalar_hand_value():
    base = ssm_loss([2.0], [1.0], [[-1.0]], [1.0])
    weights = LossWeights(w0=1.0, w_layers=[0.5], aux_weight=0.0)
    total = joint_loss([2.0], [1.0], [[1.0]], [[-1.0]], [1.0], weights, aux=0.1)
    assert total == pytest.approx(1.5 * base + 0.1, rel=1e-9)
    assert total == pytest.approx(0.127225, abs=5e-6)


def test_joint_loss_layer_count_mismatch():
    v = np.zeros((1, 2))
    weights = LossWeights(1.0, [1.0, 1.0], 0.0)
    with pytest.raises(ConfigError):
        joint_loss(v, v, [v], [v], [1.0], weights, 0.0)


# ------------------------------------------------------------ relevance aux


def test_relevance_aux_zero_label():
    g = rng(8)
    vi, vj = g.normal(size=(2, 2, 4))
    negs = g.normal(size=(3, 2, 4))
    assert relevance_aux_loss(vi, vj, negs, facet=1, label=0.0) == 0.0


def test_relevance_aux_log2_at_zero_embeddings():
    z = np.zeros((2, 4))
    assert relevance_aux_loss(z, z, [z], facet=1, label=1.0) == pytest.approx(
        math.log(2.0), abs=1e-12
    )


def test_relevance_aux_equals_masked_ssm():
    g = rng(9)
    vi, vj = g.normal(size=(2, 3, 4))
    negs = g.normal(size=(5, 3, 4))
    masked = ssm_loss(vi, vj, negs, [0.0, 1.0, 0.0])
    assert relevance_aux_loss(vi, vj, negs, facet=1) == pytest.approx(masked, rel=1e-12)
    with pytest.raises(ConfigError):
        relevance_aux_loss(vi, vj, negs, facet=5)


# ------------------------------------------------------------------ adagrad


def test_adagrad_single_update_rule():
    ids = np.arange(3)
    table = ItemEmbeddingTable.initialize(ids, 1, 2, seed=0)
    before = table.values.copy()
    opt = AdagradState.for_table(table, learning_rate=0.5, eps=1e-8)
    grad = np.array([[[2.0, -1.0]]])
    opt.update_table_rows(table, np.array([1]), grad)
    expected = before[1] - 0.5 * grad[0] / (np.abs(grad[0]) + 1e-8)
    assert np.allclose(table.values[1], expected, atol=1e-6)
    assert np.array_equal(table.values[0], before[0])
    assert np.array_equal(table.values[2], before[2])
    assert np.allclose(opt.table_acc[1], grad[0] ** 2)


def test_adagrad_duplicate_rows_accumulate_before_update():
    ids = np.arange(2)
    table = ItemEmbeddingTable.initialize(ids, 1, 1, seed=1)
    before = float(table.values[0, 0, 0])
    opt = AdagradState.for_table(table, 0.1)
    grads = np.array([[[1.0]], [[1.0]]])
    opt.update_table_rows(table, np.array([0, 0]), grads)
    # one update with summed gradient 2, not two updates of 1
    assert table.values[0, 0, 0] == pytest.approx(before - 0.1 * 2.0 / (2.0 + 1e-8))


# --------------------------------------------------------------- train step


def small_world(num_items=12, num_facets=2, dim=4, seed=0):
    ids = np.arange(num_items)
    table = ItemEmbeddingTable.initialize(ids, num_facets, dim, seed)
    opt = AdagradState.for_table(table, 0.01)
    return table, opt


def test_train_step_empty_batch_no_change():
    table, opt = small_world()
    before = table.values.copy()
    batch = TrainBatch(np.empty(0, np.int64), np.empty(0, np.int64),
                       np.empty((0, 2), np.float32), np.empty(0, np.int64))
    weights = LossWeights(1.0, [1.0], 0.0)
    sched = DelayedStartSchedule(0, [0])
    cb = Codebook([rng(1).normal(size=(2, 4, 4)).astype(np.float32)])
    stats = train_step(batch, table, cb, weights, opt, sched)
    assert stats.total == 0.0
    assert np.array_equal(table.values, before)
    assert opt.step == 0


def test_train_step_loss_strictly_decreases():
    table, opt = small_world(seed=3)
    batch = TrainBatch(
        np.array([2]), np.array([5]), np.array([[1.0, 1.0]], dtype=np.float32),
        np.array([7, 9, 11]),
    )
    weights = LossWeights(1.0, [], 0.0)
    sched = DelayedStartSchedule(0, [])
    losses = [train_step(batch, table, None, weights, opt, sched).total
              for _ in range(25)]
    diffs = np.diff(losses)
    assert np.all(diffs < 0), losses[:5]


def test_train_step_inactive_layers_leave_codebook_unchanged():
    table, opt = small_world(seed=4)
    cb = Codebook([rng(2).normal(size=(2, 4, 4)).astype(np.float32)])
    before = cb.layers[0].copy()
    batch = TrainBatch(
        np.array([0, 1]), np.array([2, 3]),
        np.ones((2, 2), dtype=np.float32), np.array([5, 6]),
    )
    sched = DelayedStartSchedule(100, [100])  # step 0 < threshold
    train_step(batch, table, cb, LossWeights(1.0, [1.0], 0.0), opt, sched,
               reg_weight=0.5)
    assert np.array_equal(cb.layers[0], before)


def test_train_step_update_locality():
    table, opt = small_world(num_items=20, seed=5)
    values_before = table.values.copy()
    cb = Codebook([
        rng(3).normal(size=(2, 6, 4)).astype(np.float32),
        rng(4).normal(size=(2, 3, 4)).astype(np.float32),
    ])
    layers_before = [l.copy() for l in cb.layers]
    batch = TrainBatch(
        np.array([1, 2]), np.array([3, 4]),
        np.ones((2, 2), dtype=np.float32), np.array([10, 11, 12]),
    )
    sched = DelayedStartSchedule(0, [0, 0])
    stats = train_step(batch, table, cb, LossWeights(1.0, [1.0, 1.0], 1.0),
                       opt, sched, reg_weight=0.1)
    assert stats.total > 0
    touched = {1, 2, 3, 4, 10, 11, 12}
    for row in range(20):
        changed = not np.array_equal(table.values[row], values_before[row])
        assert changed == (row in touched)
    # only codewords selected by the two candidates may move
    from mfli.quantizer import quantize

    selected = {0: set(), 1: set()}
    for cand in (3, 4):
        out = quantize(values_before[cand], cb_before(layers_before))
        for l in range(2):
            for f in range(2):
                selected[l].add((f, int(out.indices[l, f])))
    for l in range(2):
        for f in range(2):
            for j in range(cb.layers[l].shape[1]):
                changed = not np.array_equal(cb.layers[l][f, j], layers_before[l][f, j])
                assert changed == ((f, j) in selected[l]), (l, f, j)


def cb_before(layers):
    return Codebook([l.copy() for l in layers])


def test_train_step_quantized_terms_change_codebook():
    table, opt = small_world(seed=6)
    cb = Codebook([rng(5).normal(size=(2, 4, 4)).astype(np.float32)])
    before = cb.layers[0].copy()
    batch = TrainBatch(
        np.array([0]), np.array([1]), np.ones((1, 2), dtype=np.float32),
        np.array([4, 5]),
    )
    sched = DelayedStartSchedule(0, [0])
    train_step(batch, table, cb, LossWeights(1.0, [1.0], 0.0), opt, sched)
    assert not np.array_equal(cb.layers[0], before)


def test_sample_negatives_disjoint_and_deterministic():
    g1, g2 = rng(7), rng(7)
    excluded = np.array([1, 2, 3])
    a = sample_negatives(g1, 100, 50, excluded)
    b = sample_negatives(g2, 100, 50, excluded)
    assert np.array_equal(a, b)
    assert not np.isin(a, excluded).any()
    with pytest.raises(ConfigError):
        sample_negatives(rng(0), 3, 2, np.array([0, 1, 2]))


def test_train_batch_validation():
    with pytest.raises(ConfigError):
        TrainBatch(np.array([0]), np.array([1]), np.ones((1, 2), np.float32),
                   np.array([1]))  # negative collides with candidate


# ---------------------------------------------------------------- full loop


def tiny_run(epochs=3, warmup=4, activation=(4, 8), num_facets=2):
    corpus_cfg = CorpusConfig(
        num_items=300, num_t1_topics=2, num_t2_per_t1=2, num_events=2000,
        topic_affinity=0.8, fresh_item_rate=0.0, seed=13,
    )
    items = generate_corpus(corpus_cfg)
    events = generate_events(items, corpus_cfg, num_facets=num_facets)
    train_events, _ = split_train_eval(events, corpus_cfg.resolved_boundary)
    tcfg = TrainingConfig(
        num_facets=num_facets, dim=8, batch_size=64, learning_rate=0.05,
        num_negatives=16, epochs=epochs, warmup_steps=warmup,
        layer_activation=list(activation),
    )
    ccfg = CodebookConfig(layer_sizes=[8, 4])
    return train(items, train_events, tcfg, ccfg, seed=13)


def test_train_loop_reduces_loss_and_builds_codebook():
    ckpt, history = tiny_run()
    assert ckpt.codebook is not None
    assert ckpt.codebook.layer_sizes == (8, 4)
    assert all(ckpt.layer_initialized)
    assert ckpt.step == len(history)
    # compare windows after the last layer activates so the loss has the
    # same term composition on both sides
    first = np.mean(history[8:28])
    last = np.mean(history[-20:])
    assert last < first
    assert np.all(np.isfinite(ckpt.table.values))


def test_train_deterministic():
    a, ha = tiny_run()
    b, hb = tiny_run()
    assert ha == hb
    assert np.array_equal(a.table.values, b.table.values)
    for la, lb in zip(a.codebook.layers, b.codebook.layers):
        assert np.array_equal(la, lb)


def test_checkpoint_round_trip(tmp_path):
    ckpt, _ = tiny_run(epochs=1)
    path = tmp_path / "ckpt.mfli"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert np.array_equal(back.table.ids, ckpt.table.ids)
    assert np.array_equal(back.table.values, ckpt.table.values)
    assert np.array_equal(back.optimizer.table_acc, ckpt.optimizer.table_acc)
    assert back.optimizer.step == ckpt.step
    assert back.layer_sizes == ckpt.layer_sizes
    assert back.schedule.per_layer_activation == ckpt.schedule.per_layer_activation
    for la, lb in zip(back.codebook.layers, ckpt.codebook.layers):
        assert np.array_equal(la, lb)
    for aa, ab in zip(back.optimizer.codebook_acc, ckpt.optimizer.codebook_acc):
        assert np.array_equal(aa, ab)


def test_embedding_for_cold_item_is_deterministic():
    ckpt, _ = tiny_run(epochs=1)
    known = ckpt.embedding_for(int(ckpt.table.ids[5]))
    assert np.array_equal(known, ckpt.table.values[5])
    cold_a = ckpt.embedding_for(10**6)
    cold_b = ckpt.embedding_for(10**6)
    assert np.array_equal(cold_a, cold_b)
    assert cold_a.shape == (2, 8)
    bound = 1 / np.sqrt(8)
    assert np.all(np.abs(cold_a) <= bound)
    assert not np.array_equal(cold_a, ckpt.embedding_for(10**6 + 1))
