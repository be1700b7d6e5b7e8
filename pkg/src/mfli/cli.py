"""Command-line entry point.

Subcommands cover the whole artifact lifecycle: `gen` writes a synthetic
corpus, `train` fits embeddings plus codebook, `publish-full`/`publish-delta`
freeze snapshots, `serve` exposes the HTTP endpoint, `query` retrieves
in-process, `eval` runs the end-to-end pipeline, `bench` measures throughput,
and `stats` prints index distribution statistics.

File conventions inside a work directory: items.jsonl, events.jsonl,
checkpoint.mfli, full.snap, delta.snap.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .corpus import (
    generate_corpus,
    generate_events,
    read_events,
    read_items,
    split_train_eval,
    write_events,
    write_items,
)
from .errors import MFLIError
from .evaluate import generate_requests, index_stats, run_pipeline, throughput_bench
from .index_store import (
    DeltaSnapshot,
    FullSnapshot,
    deserialize_snapshot,
    publish_delta_snapshot,
    publish_full_snapshot,
    serialize_snapshot,
)
from .rebalance import SizeBounds
from .service import RetrievalService, make_server
from .serving import Retriever
from .training import load_checkpoint, save_checkpoint, train

ITEMS_FILE = "items.jsonl"
EVENTS_FILE = "events.jsonl"
CHECKPOINT_FILE = "checkpoint.mfli"
FULL_FILE = "full.snap"
DELTA_FILE = "delta.snap"


def _resolve_config(args: argparse.Namespace) -> Config:
    config = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        config.corpus.seed = args.seed
    config.validate()
    return config


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _read_full(path: Path) -> FullSnapshot:
    snapshot = deserialize_snapshot(path.read_bytes())
    if not isinstance(snapshot, FullSnapshot):
        raise MFLIError(f"{path} does not hold a full snapshot")
    return snapshot


def _read_delta(path: Path) -> DeltaSnapshot:
    snapshot = deserialize_snapshot(path.read_bytes())
    if not isinstance(snapshot, DeltaSnapshot):
        raise MFLIError(f"{path} does not hold a delta snapshot")
    return snapshot


def _load_world(args: argparse.Namespace) -> tuple[FullSnapshot, DeltaSnapshot | None, object]:
    root = Path(args.snapshot_dir)
    full = _read_full(root / FULL_FILE)
    delta_path = root / DELTA_FILE
    delta = _read_delta(delta_path) if delta_path.exists() else None
    checkpoint_path = Path(args.checkpoint) if args.checkpoint else root / CHECKPOINT_FILE
    checkpoint = load_checkpoint(checkpoint_path)
    return full, delta, checkpoint


def _build_retriever(args: argparse.Namespace, config: Config) -> tuple[Retriever, int]:
    full, delta, checkpoint = _load_world(args)
    current = max(full.created_at, delta.created_at if delta else full.created_at)
    return Retriever(full, delta, checkpoint, config.selection), current


def cmd_gen(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = generate_corpus(config.corpus)
    events = generate_events(items, config.corpus, config.training.num_facets)
    write_items(out / ITEMS_FILE, items)
    write_events(out / EVENTS_FILE, events)
    _print({
        "items": len(items),
        "events": len(events),
        "boundary_tick": config.corpus.resolved_boundary,
        "out": str(out),
    })
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    corpus_dir = Path(args.corpus)
    items = read_items(corpus_dir / ITEMS_FILE)
    events = read_events(corpus_dir / EVENTS_FILE)
    train_events, _ = split_train_eval(events, config.corpus.resolved_boundary)
    checkpoint, history = train(
        items, train_events, config.training, config.codebook, config.corpus.seed
    )
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / CHECKPOINT_FILE
    save_checkpoint(out, checkpoint)
    _print({
        "checkpoint": str(out),
        "steps": len(history),
        "final_loss": history[-1] if history else None,
        "items_embedded": len(checkpoint.table),
    })
    return 0


def _pool_split(items, boundary: int) -> tuple[list[int], list[int]]:
    pool = [it.item_id for it in items if it.created_at <= boundary]
    fresh = [it.item_id for it in items if it.created_at > boundary]
    return pool, fresh


def cmd_publish_full(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    items = read_items(Path(args.corpus) / ITEMS_FILE)
    checkpoint = load_checkpoint(args.checkpoint)
    tick = args.tick if args.tick is not None else config.corpus.resolved_boundary
    pool, _ = _pool_split(items, tick)
    lower, upper = config.bounds.resolved()
    full = publish_full_snapshot(
        checkpoint, pool, SizeBounds(lower, upper), tick=tick,
        plan_out=args.plan_out,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / FULL_FILE).write_bytes(serialize_snapshot(full))
    _print({
        "snapshot_id": full.snapshot_id,
        "pool_size": len(pool),
        "merged_counts": full.merged_counts,
        "out": str(out / FULL_FILE),
    })
    return 0


def cmd_publish_delta(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    items = read_items(Path(args.corpus) / ITEMS_FILE)
    checkpoint = load_checkpoint(args.checkpoint)
    full = _read_full(Path(args.full))
    fresh = sorted(
        {it.item_id for it in items} - set(int(i) for i in full.assignments.ids)
    )
    tick = args.tick if args.tick is not None else config.corpus.num_events
    delta = publish_delta_snapshot(checkpoint, fresh, tick=tick, full=full)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / DELTA_FILE).write_bytes(serialize_snapshot(delta))
    _print({
        "snapshot_id": delta.snapshot_id,
        "paired_full_id": delta.paired_full_id,
        "fresh_items": len(fresh),
        "out": str(out / DELTA_FILE),
    })
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    retriever, current = _build_retriever(args, config)
    server = make_server(retriever, args.host, args.port, current_tick=current)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _parse_triggers(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part != ""]
    except ValueError as exc:
        raise MFLIError(f"triggers must be comma-separated ids: {exc}") from exc


def cmd_query(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    retriever, current = _build_retriever(args, config)
    service = RetrievalService(retriever, current_tick=current)
    body: dict = {"triggers": _parse_triggers(args.triggers), "k": args.k}
    if args.seed is not None:
        body["seed"] = args.seed
    _print(service.handle_retrieve(body))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    report = run_pipeline(config, out_dir=args.out, bench_duration=args.bench_duration)
    _print(report.to_dict())
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    retriever, _ = _build_retriever(args, config)
    rng = np.random.default_rng(config.corpus.seed)
    requests = generate_requests(
        rng, retriever.pool_ids, args.requests,
        config.eval.bench_triggers_per_request,
    )
    result = throughput_bench(retriever, requests, k=args.k, duration=args.duration)
    _print({
        "mfli_qps": result.mfli_qps,
        "brute_qps": result.brute_qps,
        "ratio": result.ratio,
        "mfli_queries": result.mfli_queries,
        "brute_queries": result.brute_queries,
    })
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    root = Path(args.snapshot_dir)
    full = _read_full(root / FULL_FILE)
    stats = index_stats(full)
    _print({
        "snapshot_id": full.snapshot_id,
        "merged_counts": full.merged_counts,
        "size_histogram": [
            {str(size): count for size, count in sorted(hist.items())}
            for hist in stats.size_histogram
        ],
        "usage_ratio": stats.usage_ratio,
        "original_usage_ratio": stats.original_usage_ratio,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")

    parser = argparse.ArgumentParser(prog="mfli", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train embeddings + codebook")
    p.add_argument("--corpus", required=True, help="directory holding items/events")
    p.add_argument("--out", required=True, help="checkpoint file or directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("publish-full", parents=[common],
                       help="quantize, rebalance, and freeze a full snapshot")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tick", type=int, help="pool cutoff tick (default: boundary)")
    p.add_argument("--plan-out", help="rebalance audit log (one record per line)")
    p.set_defaults(func=cmd_publish_full)

    p = sub.add_parser("publish-delta", parents=[common],
                       help="index fresh items against a full snapshot")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--full", required=True, help="paired full snapshot file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tick", type=int, help="delta tick (default: last event tick)")
    p.set_defaults(func=cmd_publish_delta)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP endpoint")
    p.add_argument("--snapshot-dir", required=True)
    p.add_argument("--checkpoint", help="checkpoint path if outside snapshot dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", parents=[common], help="retrieve in-process")
    p.add_argument("--snapshot-dir", required=True)
    p.add_argument("--checkpoint", help="checkpoint path if outside snapshot dir")
    p.add_argument("--triggers", required=True, help="comma-separated item ids")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="end-to-end pipeline + report")
    p.add_argument("--out", help="report directory (report.json + CSV)")
    p.add_argument("--bench-duration", type=float, default=0.0,
                   help="seconds of throughput measurement to fold into the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="throughput comparison")
    p.add_argument("--snapshot-dir", required=True)
    p.add_argument("--checkpoint", help="checkpoint path if outside snapshot dir")
    p.add_argument("--requests", type=int, default=200)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--k", type=int, default=100)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", parents=[common], help="index size/usage statistics")
    p.add_argument("--snapshot-dir", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return 2
    except MFLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
