import json
import threading
import urllib.error
import urllib.request

import pytest

from mfli.config import SelectionConfig
from mfli.index_store import publish_delta_snapshot, publish_full_snapshot
from mfli.rebalance import SizeBounds
from mfli.service import make_server
from mfli.serving import Retriever
from tests.test_index_store import make_checkpoint


@pytest.fixture(scope="module")
def server():
    ckpt = make_checkpoint(num_items=60, num_facets=2, dim=8, layer_sizes=(4, 2))
    full = publish_full_snapshot(ckpt, range(60), SizeBounds(2, 30), tick=100)
    delta = publish_delta_snapshot(ckpt, [500, 501], tick=130, full=full)
    retriever = Retriever(full, delta, ckpt, SelectionConfig(k_total=6, top_n=4))
    srv = make_server(retriever, port=0, current_tick=140)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    thread.join(timeout=5)


def post(url, payload, path="/v1/retrieve"):
    req = urllib.request.Request(
        url + path,
        data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req) as resp:
        return resp.status, json.loads(resp.read())


def get(url, path):
    with urllib.request.urlopen(url + path) as resp:
        return resp.status, json.loads(resp.read())


def test_retrieve_endpoint(server):
    status, body = post(server, {"triggers": [0, 1, 2], "seed": 3})
    assert status == 200
    assert body["stats"]["skipped_triggers"] == 0
    assert body["stats"]["indices_selected"] >= 1
    assert len(body["items"]) >= 1
    first = body["items"][0]
    assert set(first) == {"id", "score", "index", "facet"}


def test_retrieve_is_deterministic_over_http(server):
    _, a = post(server, {"triggers": [5, 9], "seed": 11})
    _, b = post(server, {"triggers": [5, 9], "seed": 11})
    assert a == b


def test_retrieve_overrides(server):
    _, small = post(server, {"triggers": [0, 1, 2, 3], "seed": 0, "k": 2, "n": 1})
    _, large = post(server, {"triggers": [0, 1, 2, 3], "seed": 0, "k": 8, "n": 10})
    assert small["stats"]["indices_selected"] <= large["stats"]["indices_selected"]
    assert len(small["items"]) <= len(large["items"])
    status, quota = post(
        server, {"triggers": [0, 1, 2, 3], "seed": 0, "alpha": 1.0, "tau": 0.7}
    )
    assert status == 200 and quota["items"]


def test_unknown_triggers_yield_400(server):
    with pytest.raises(urllib.error.HTTPError) as err:
        post(server, {"triggers": [77777, 88888]})
    assert err.value.code == 400
    body = json.loads(err.value.read())
    assert body["kind"] == "empty_trigger"


def test_malformed_body_yields_400(server):
    req = urllib.request.Request(
        server + "/v1/retrieve", data=b"not json", method="POST",
        headers={"Content-Length": "8"},
    )
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(req)
    assert err.value.code == 400
    with pytest.raises(urllib.error.HTTPError) as err2:
        post(server, {"triggers": "nope"})
    assert err2.value.code == 400


def test_snapshot_endpoint(server):
    status, info = get(server, "/v1/snapshot")
    assert status == 200
    assert info["full"]["snapshot_id"] == "full-0000000100"
    assert info["full"]["age_ticks"] == 40
    assert info["delta"]["paired_full_id"] == "full-0000000100"
    assert info["delta"]["age_ticks"] == 10


def test_unknown_path_is_404(server):
    with pytest.raises(urllib.error.HTTPError) as err:
        get(server, "/v2/nope")
    assert err.value.code == 404
