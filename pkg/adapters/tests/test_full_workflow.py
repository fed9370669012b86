"""Whole-loop check: adapter-produced embeddings and live adapter servers
drive the engine CLI unchanged (index -> localize over HTTP providers)."""

import json
import threading

import pytest
import uvicorn

from viewmem_adapters.backends import (
    StubEmbeddingBackend,
    StubSegmentationBackend,
    StubVlmBackend,
)
from viewmem_adapters.embed import embed_query, embed_scene
from viewmem_adapters.servers import ImageStore, create_rerank_app, create_segment_app

from viewmem.cli import main as engine_main


@pytest.fixture
def live_servers(scene_dir):
    store = ImageStore(scene_dir / "manifest.jsonl")
    servers = []
    ports = {}
    for name, app in (
        ("segment", create_segment_app(StubSegmentationBackend(), store)),
        ("rerank", create_rerank_app(StubVlmBackend(), store)),
    ):
        config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
        server = uvicorn.Server(config)
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        while not server.started:
            pass
        ports[name] = server.servers[0].sockets[0].getsockname()[1]
        servers.append((server, thread))
    yield ports
    for server, thread in servers:
        server.should_exit = True
        thread.join(timeout=5)


def test_engine_cli_runs_on_adapter_outputs(scene_dir, live_servers, tmp_path):
    emb = tmp_path / "scene.emb1"
    embed_scene(scene_dir / "manifest.jsonl", StubEmbeddingBackend(64), emb)
    query_emb = tmp_path / "query.emb1"
    embed_query(StubEmbeddingBackend(64), query_emb, text="mug")

    idx = tmp_path / "idx"
    assert engine_main([
        "build-index", "--scene", str(scene_dir / "manifest.jsonl"),
        "--embeddings", str(emb), "--out", str(idx),
    ]) == 0

    report = tmp_path / "report.json"
    code = engine_main([
        "localize", "--index", str(idx), "--scene", str(scene_dir / "manifest.jsonl"),
        "--query", "mug", "--query-emb", str(query_emb),
        "--seg-url", f"http://127.0.0.1:{live_servers['segment']}",
        "--rerank-url", f"http://127.0.0.1:{live_servers['rerank']}",
        "--out", str(report),
    ])
    assert code == 0
    payload = json.loads(report.read_text())
    assert payload["candidates"]
    assert all(len(c["center"]) == 3 for c in payload["candidates"])
