"""Configuration sections and JSON loading.

A config file is a single JSON document with any of the sections
{corpus, training, codebook, bounds, selection, snapshot_cadence, eval};
unspecified fields keep their desk-scale defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

# Named codebook shapes: desk scale vs. the production-scale preset.
CODEBOOK_PRESETS: dict[str, tuple[int, ...]] = {
    "desk": (64, 16),
    "production": (512, 128),
}

# Per-index size bounds presets (min items, max items).
BOUNDS_PRESETS: dict[str, tuple[int, int]] = {
    "desk": (5, 50),
    "production": (100, 20_000),
}


@dataclass
class CorpusConfig:
    """Synthetic corpus and co-engagement event generation parameters."""

    num_items: int = 10_000
    num_t1_topics: int = 8
    num_t2_per_t1: int = 8
    num_events: int = 100_000
    topic_affinity: float = 0.7
    fresh_item_rate: float = 0.05
    seed: int = 0
    # Event-time tick separating the train window from the eval window; fresh
    # items appear after it at fresh_item_rate per tick. Defaults to 80% of
    # the event timeline.
    boundary_tick: int | None = None

    @property
    def num_t2_topics(self) -> int:
        return self.num_t1_topics * self.num_t2_per_t1

    @property
    def resolved_boundary(self) -> int:
        if self.boundary_tick is not None:
            return self.boundary_tick
        return (self.num_events * 8) // 10

    def validate(self) -> None:
        for name in ("num_items", "num_t1_topics", "num_t2_per_t1", "num_events"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"corpus.{name} must be > 0")
        if not 0.0 <= self.topic_affinity <= 1.0:
            raise ConfigError("corpus.topic_affinity must lie in [0, 1]")
        if self.fresh_item_rate < 0:
            raise ConfigError("corpus.fresh_item_rate must be >= 0")
        if not 0 <= self.resolved_boundary <= self.num_events:
            raise ConfigError("corpus.boundary_tick outside the event timeline")


@dataclass
class TrainingConfig:
    """Joint embedding/codebook training parameters (desk-scale defaults)."""

    num_facets: int = 2
    dim: int = 32
    batch_size: int = 256
    learning_rate: float = 0.01
    num_negatives: int = 128
    epochs: int = 1
    w0: float = 1.0
    w_layers: list[float] | None = None  # None -> 1.0 for every codebook layer
    aux_weight: float = 1.0
    reg_weight: float = 0.1
    warmup_steps: int = 1000
    layer_activation: list[int] | None = None  # None -> (warmup, 2*warmup, ...)
    adagrad_eps: float = 1e-8

    def resolved_w_layers(self, num_layers: int) -> list[float]:
        if self.w_layers is None:
            return [1.0] * num_layers
        if len(self.w_layers) != num_layers:
            raise ConfigError(
                f"training.w_layers has {len(self.w_layers)} entries for {num_layers} layers"
            )
        return list(self.w_layers)

    def resolved_activation(self, num_layers: int) -> list[int]:
        if self.layer_activation is None:
            return [self.warmup_steps * (l + 1) for l in range(num_layers)]
        if len(self.layer_activation) != num_layers:
            raise ConfigError(
                f"training.layer_activation has {len(self.layer_activation)} entries"
                f" for {num_layers} layers"
            )
        return list(self.layer_activation)

    def validate(self) -> None:
        if self.num_facets <= 0 or self.dim <= 0 or self.batch_size <= 0:
            raise ConfigError("training facet/dim/batch counts must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate must be > 0")
        if self.num_negatives <= 0:
            raise ConfigError("training.num_negatives must be > 0")
        if self.w0 < 0 or self.aux_weight < 0 or self.reg_weight < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class CodebookConfig:
    preset: str | None = None
    layer_sizes: list[int] = field(default_factory=lambda: list(CODEBOOK_PRESETS["desk"]))

    def resolved_sizes(self) -> tuple[int, ...]:
        if self.preset is not None:
            try:
                return CODEBOOK_PRESETS[self.preset]
            except KeyError:
                raise ConfigError(f"unknown codebook preset {self.preset!r}") from None
        return tuple(self.layer_sizes)

    def validate(self) -> None:
        sizes = self.resolved_sizes()
        if not sizes or any(n <= 0 for n in sizes):
            raise ConfigError("codebook.layer_sizes must be non-empty positive ints")


@dataclass
class BoundsConfig:
    preset: str | None = None
    lower: int = 5
    upper: int = 50

    def resolved(self) -> tuple[int, int]:
        if self.preset is not None:
            try:
                return BOUNDS_PRESETS[self.preset]
            except KeyError:
                raise ConfigError(f"unknown bounds preset {self.preset!r}") from None
        return (self.lower, self.upper)

    def validate(self) -> None:
        lower, upper = self.resolved()
        if not 0 < lower < upper:
            raise ConfigError("bounds must satisfy 0 < lower < upper")


@dataclass
class SelectionConfig:
    """Index selection and per-index reranking parameters."""

    k_total: int = 200
    k_per_facet: list[int] | None = None  # None -> even split, remainder to facet 1
    tau: float = 1.0
    alpha: float = 0.0
    top_n: int = 15
    q_tot: int = 100
    use_quota: bool = False
    recent_boost: float = 2.0
    recent_window: int = 5
    enable_recent_boost: bool = True
    longtail_threshold: int = 8
    longtail_budget: int = 4
    enable_longtail: bool = True

    def resolved_k_per_facet(self, num_facets: int) -> list[int]:
        if self.k_per_facet is not None:
            if len(self.k_per_facet) != num_facets:
                raise ConfigError("selection.k_per_facet length must equal facet count")
            return list(self.k_per_facet)
        base, rem = divmod(self.k_total, num_facets)
        return [base + rem] + [base] * (num_facets - 1)

    def validate(self) -> None:
        if self.k_total <= 0:
            raise ConfigError("selection.k_total must be > 0")
        if self.tau <= 0:
            raise ConfigError("selection.tau must be > 0")
        if self.alpha < 0:
            raise ConfigError("selection.alpha must be >= 0")
        if self.top_n <= 0 or self.q_tot <= 0:
            raise ConfigError("selection.top_n and q_tot must be > 0")
        if self.recent_boost < 1.0:
            raise ConfigError("selection.recent_boost must be >= 1")


@dataclass
class SnapshotCadenceConfig:
    full_interval: int = 500  # ticks between full snapshots
    delta_interval: int = 10  # ticks between delta snapshots

    def validate(self) -> None:
        if self.full_interval <= 0 or self.delta_interval <= 0:
            raise ConfigError("snapshot cadence intervals must be > 0")


@dataclass
class EvalConfig:
    recall_k: int = 100
    max_eval_triggers: int = 1000
    relevance_samples: int = 2000
    bench_requests: int = 200
    bench_triggers_per_request: int = 8

    def validate(self) -> None:
        if self.recall_k <= 0:
            raise ConfigError("eval.recall_k must be > 0")


@dataclass
class Config:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    snapshot_cadence: SnapshotCadenceConfig = field(default_factory=SnapshotCadenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "training": TrainingConfig,
    "codebook": CodebookConfig,
    "bounds": BoundsConfig,
    "selection": SelectionConfig,
    "snapshot_cadence": SnapshotCadenceConfig,
    "eval": EvalConfig,
}


def _build_section(cls: type, data: dict[str, Any], section: str) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(doc: dict[str, Any]) -> Config:
    unknown = set(doc) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {
        name: _build_section(cls, doc.get(name, {}), name)
        for name, cls in _SECTION_TYPES.items()
    }
    cfg = Config(**sections)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, seed: int | None = None) -> Config:
    """Load a config file (or defaults when path is None), with optional seed override."""
    if path is None:
        cfg = Config()
        cfg.validate()
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = config_from_dict(doc)
    if seed is not None:
        cfg.corpus.seed = seed
    return cfg
