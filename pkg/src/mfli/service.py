"""HTTP front end for retrieval: POST /v1/retrieve, GET /v1/snapshot.

Stdlib http.server only; one ThreadingHTTPServer instance wraps a single
Retriever over immutable snapshots, so concurrent requests need no locks.
"""

from __future__ import annotations

import json
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import ConfigError, EmptyTriggerError, MFLIError
from .serving import Retriever


class RetrievalService:
    """Request decoding + config overrides around a Retriever."""

    def __init__(self, retriever: Retriever, current_tick: int | None = None) -> None:
        self.retriever = retriever
        newest = retriever.full.created_at
        if retriever.delta is not None:
            newest = max(newest, retriever.delta.created_at)
        self.current_tick = newest if current_tick is None else int(current_tick)

    def snapshot_info(self) -> dict:
        full = self.retriever.full
        delta = self.retriever.delta
        info = {
            "current_tick": self.current_tick,
            "full": {
                "snapshot_id": full.snapshot_id,
                "created_at": full.created_at,
                "age_ticks": self.current_tick - full.created_at,
            },
            "delta": None,
        }
        if delta is not None:
            info["delta"] = {
                "snapshot_id": delta.snapshot_id,
                "created_at": delta.created_at,
                "age_ticks": self.current_tick - delta.created_at,
                "paired_full_id": delta.paired_full_id,
            }
        return info

    def handle_retrieve(self, body: dict) -> dict:
        triggers = body.get("triggers")
        if not isinstance(triggers, list) or not all(
            isinstance(t, int) and not isinstance(t, bool) for t in triggers
        ):
            raise ConfigError("triggers must be a list of integer item ids")
        updates: dict = {}
        if "k" in body:
            updates["k_total"] = int(body["k"])
            updates["k_per_facet"] = None
        if "n" in body:
            updates["top_n"] = int(body["n"])
        if "tau" in body:
            updates["tau"] = float(body["tau"])
        if "alpha" in body:
            updates["alpha"] = float(body["alpha"])
            updates["use_quota"] = updates["alpha"] > 0
        config = replace(self.retriever.config, **updates) if updates else self.retriever.config
        config.validate()
        result = self.retriever.retrieve(
            triggers, seed=int(body.get("seed", 0)), config=config
        )
        return {
            "items": [
                {"id": r.item_id, "score": r.score, "index": r.index, "facet": r.facet}
                for r in result.items
            ],
            "stats": {
                "skipped_triggers": result.skipped_triggers,
                "indices_selected": result.indices_selected,
                "candidates_scanned": result.candidates_scanned,
            },
        }


class _Handler(BaseHTTPRequestHandler):
    server: "RetrievalServer"

    def log_message(self, format: str, *args) -> None:  # keep test output quiet
        pass

    def _reply(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self) -> None:
        if self.path != "/v1/snapshot":
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        self._reply(200, self.server.service.snapshot_info())

    def do_POST(self) -> None:
        if self.path != "/v1/retrieve":
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            if not isinstance(body, dict):
                raise ConfigError("request body must be a JSON object")
            self._reply(200, self.server.service.handle_retrieve(body))
        except EmptyTriggerError as exc:
            self._reply(400, {"error": str(exc), "kind": "empty_trigger"})
        except (MFLIError, ValueError, json.JSONDecodeError) as exc:
            self._reply(400, {"error": str(exc)})


class RetrievalServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, service: RetrievalService, host: str = "127.0.0.1",
                 port: int = 8080) -> None:
        self.service = service
        super().__init__((host, port), _Handler)


def make_server(retriever: Retriever, host: str = "127.0.0.1", port: int = 8080,
                current_tick: int | None = None) -> RetrievalServer:
    return RetrievalServer(RetrievalService(retriever, current_tick), host, port)
