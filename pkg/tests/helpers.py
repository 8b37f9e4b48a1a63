"""Shared test utilities: an in-memory provider and a wire-contract HTTP stub."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from cape.providers import ContextWindow, ProviderDescriptor
from cape.vocab import EmbeddingTable, Vocabulary, embeddings_to_binary


class ArrayProvider:
    """In-memory provider for tests: logits come from a callable."""

    kind = "array"

    def __init__(self, vocab: Vocabulary, table: EmbeddingTable, logits_fn, mode="bidirectional"):
        self._vocab = vocab
        self._table = table
        self._logits_fn = logits_fn
        self.mode = mode

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    @property
    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            kind=self.kind,
            vocabulary_hash=self._vocab.sha256,
            model_name="in-memory",
            mode=self.mode,
            vocab_size=self._vocab.size,
            dim=self._table.dim,
        )

    def tokenize(self, text: str):
        return [self._vocab.id_of(t) for t in text.split()]

    def detokenize(self, ids):
        return " ".join(self._vocab.token_of(i) for i in ids)

    def context_logits(self, window: ContextWindow) -> np.ndarray:
        return np.asarray(self._logits_fn(window), dtype=np.float64)

    def embedding_table(self) -> EmbeddingTable:
        return self._table


class ContractStubServer:
    """Minimal HTTP sidecar implementing the provider wire contract,
    answering from an in-memory provider (usually a FileProvider)."""

    def __init__(self, provider, fail_first: int = 0):
        self.provider = provider
        self.fail_remaining = fail_first  # simulate flaky transport
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _json(self, code, obj):
                body = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if stub.fail_remaining > 0:
                    stub.fail_remaining -= 1
                    self.connection.close()
                    return
                if self.path == "/info":
                    d = stub.provider.descriptor
                    self._json(200, {
                        "model": d.model_name,
                        "vocab_size": d.vocab_size,
                        "dim": d.dim,
                        "mode": d.mode,
                        "vocab_sha256": d.vocabulary_hash,
                    })
                elif self.path == "/embeddings":
                    body = embeddings_to_binary(stub.provider.embedding_table())
                    self.send_response(200)
                    self.send_header("Content-Type", "application/octet-stream")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                else:
                    self._json(404, {"error": f"no route {self.path}"})

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length))
                except ValueError:
                    self._json(400, {"error": "malformed JSON"})
                    return
                try:
                    if self.path == "/logits":
                        window = ContextWindow(
                            tuple(payload["token_ids"]),
                            payload["target_position"],
                            stub.provider.mode,
                        )
                        vec = stub.provider.context_logits(window)
                        self._json(200, {"logits": [float(v) for v in vec]})
                    elif self.path == "/tokenize":
                        self._json(200, {"token_ids": stub.provider.tokenize(payload["text"])})
                    else:
                        self._json(404, {"error": f"no route {self.path}"})
                except Exception as exc:  # noqa: BLE001 - surface as wire error
                    self._json(400, {"error": str(exc)})

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._server.server_port}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()


def toy_vocabulary(n: int = 5) -> Vocabulary:
    return Vocabulary(tuple(f"tok{i}" for i in range(n)))


def line_embeddings(positions) -> EmbeddingTable:
    """1-D embeddings at the given coordinates (padded to 2 dims)."""
    arr = np.zeros((len(positions), 2))
    arr[:, 0] = positions
    return EmbeddingTable(arr)
