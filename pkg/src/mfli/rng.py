"""Deterministic RNG streams derived from one user-facing seed.

Each subsystem draws from its own SeedSequence spawn key so that adding
draws in one stage never shifts the randomness of another.
"""

from __future__ import annotations

import numpy as np

CORPUS_STREAM = 1
EVENT_STREAM = 2
INIT_STREAM = 3
TRAIN_STREAM = 4
CODEBOOK_STREAM = 5
REBALANCE_STREAM = 6
EVAL_STREAM = 7
SERVE_STREAM = 8
BENCH_STREAM = 9


def spawn_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for stream `path` under `seed`; stable across processes."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def cold_start_embedding(init_seed: int, item_id: int, num_facets: int, dim: int) -> np.ndarray:
    """Content-free embedding for an item never seen in training.

    Keyed by (init_seed, item_id) so any process derives the same vector.
    Matches the trainer's uniform [-1/sqrt(d), +1/sqrt(d)] initializer.
    """
    gen = np.random.default_rng(np.random.SeedSequence([int(init_seed), INIT_STREAM, int(item_id)]))
    bound = 1.0 / np.sqrt(dim)
    return gen.uniform(-bound, bound, size=(num_facets, dim)).astype(np.float32)
