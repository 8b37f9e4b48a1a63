"""Sources of tokenization, contextual logits, and embeddings.

Two implementations share one interface: a file-backed provider replaying
recorded logit vectors (hermetic, deterministic), and an HTTP client for a
model-server sidecar.  Recording an HTTP session produces a file-provider
directory, so any live run can be replayed offline.

File-provider directory layout::

    meta.json        {"dim", "mode", "model", "vocab_sha256", "vocab_size"}
    vocab.txt        one token per line, id order
    embeddings.bin   binary embedding format (see cape.vocab)
    manifest.json    {"records": {"<prompt_sha256>:<position>": "records/..."}}
    records/*.bin    |V| little-endian float32 logits per (prompt, position)

Sidecar HTTP contract::

    GET  /info        -> {"model", "vocab_size", "dim", "mode", "vocab_sha256"}
    POST /logits      {"token_ids": [int], "target_position": int}
                      -> {"logits": [float; vocab_size]}
    POST /tokenize    {"text": str} -> {"token_ids": [int]}
    GET  /embeddings  -> binary embedding format

Errors arrive as {"error": str} with a non-2xx status.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass

import httpx
import numpy as np

from .errors import DataError, ProviderError
from .vocab import (
    EmbeddingTable,
    Vocabulary,
    embeddings_to_binary,
    load_embeddings_binary,
    load_vocabulary,
    parse_embeddings_binary,
    write_vocabulary,
)

MODES = ("bidirectional", "causal")
_RECORD_FLOAT = np.dtype("<f4")


@dataclass(frozen=True)
class ContextWindow:
    """One perturbation site: the full prompt plus the target position.

    In bidirectional mode the provider scores the target as a masked slot
    using tokens on both sides; in causal mode only tokens before the target
    are visible (an empty prefix yields the provider's unconditional
    next-token distribution).
    """

    token_ids: tuple[int, ...]
    target_position: int
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ProviderError(f"unknown context mode {self.mode!r}")
        if not 0 <= self.target_position < len(self.token_ids):
            raise ProviderError(
                f"target position {self.target_position} outside prompt of "
                f"length {len(self.token_ids)}"
            )


@dataclass(frozen=True)
class ProviderDescriptor:
    kind: str
    vocabulary_hash: str
    model_name: str
    mode: str
    vocab_size: int
    dim: int

    def to_json_obj(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_sha256": self.vocabulary_hash,
            "model": self.model_name,
            "mode": self.mode,
            "vocab_size": self.vocab_size,
            "dim": self.dim,
        }


def prompt_key(token_ids) -> str:
    """Canonical content hash for a token-id sequence."""
    return hashlib.sha256(",".join(str(i) for i in token_ids).encode("ascii")).hexdigest()


def record_name(token_ids, position: int) -> str:
    return f"records/{prompt_key(token_ids)[:16]}_{position:04d}.bin"


def dump_canonical_json(obj, path) -> None:
    """Stable byte-for-byte JSON serialization (sorted keys, no whitespace)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _check_length(vec: np.ndarray, vocab_size: int, source: str) -> np.ndarray:
    if vec.shape != (vocab_size,):
        raise ProviderError(
            f"{source}: logit vector of length {vec.shape[0] if vec.ndim == 1 else vec.shape} "
            f"does not match vocabulary size {vocab_size}"
        )
    if not np.isfinite(vec).all():
        raise ProviderError(f"{source}: non-finite logit value")
    return vec


class FileProvider:
    """Replays recorded logits from a fixture directory.

    Tokenization is a plain whitespace split against the bundled vocabulary;
    fixture prompts must be pre-tokenized (unknown tokens are an error, since
    real subword tokenization belongs to the sidecar).
    """

    kind = "file"

    def __init__(self, path):
        self.path = str(path)
        try:
            with open(os.path.join(self.path, "meta.json"), encoding="utf-8") as f:
                self.meta = json.load(f)
            with open(os.path.join(self.path, "manifest.json"), encoding="utf-8") as f:
                self._records: dict[str, str] = json.load(f)["records"]
        except (OSError, ValueError, KeyError) as exc:
            raise ProviderError(f"unreadable fixture directory {self.path}: {exc}") from None
        self.mode = self.meta["mode"]
        if self.mode not in MODES:
            raise ProviderError(f"{self.path}: unknown provider mode {self.mode!r}")
        self._vocab = load_vocabulary(os.path.join(self.path, "vocab.txt"))
        if self._vocab.sha256 != self.meta["vocab_sha256"]:
            raise ProviderError(
                f"{self.path}: vocab.txt hash {self._vocab.sha256[:12]}... does not match "
                f"meta.json vocab_sha256 {self.meta['vocab_sha256'][:12]}..."
            )
        self._table = None

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    @property
    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            kind=self.kind,
            vocabulary_hash=self.meta["vocab_sha256"],
            model_name=self.meta.get("model", "unknown"),
            mode=self.mode,
            vocab_size=int(self.meta["vocab_size"]),
            dim=int(self.meta["dim"]),
        )

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            if tok not in self._vocab:
                raise ProviderError(
                    f"token {tok!r} not in fixture vocabulary; the file provider "
                    "requires whitespace-pretokenized input"
                )
            ids.append(self._vocab.id_of(tok))
        return ids

    def detokenize(self, token_ids) -> str:
        return " ".join(self._vocab.token_of(i) for i in token_ids)

    def context_logits(self, window: ContextWindow) -> np.ndarray:
        if window.mode != self.mode:
            raise ProviderError(
                f"window mode {window.mode!r} does not match provider mode {self.mode!r}"
            )
        key = f"{prompt_key(window.token_ids)}:{window.target_position}"
        rel = self._records.get(key)
        if rel is None:
            raise ProviderError(
                f"no recorded logits for prompt hash {key.split(':')[0][:16]}... "
                f"position {window.target_position} in {self.path}"
            )
        data = np.fromfile(os.path.join(self.path, rel), dtype=_RECORD_FLOAT)
        return _check_length(data.astype(np.float64), self._vocab.size, rel)

    def embedding_table(self) -> EmbeddingTable:
        if self._table is None:
            self._table = load_embeddings_binary(
                os.path.join(self.path, "embeddings.bin"), self._vocab
            )
        return self._table

    def iter_recorded_logits(self):
        """Yield every stored logit vector (manifest order), e.g. for
        calibrating the clip bound from a fixture set."""
        for key in sorted(self._records):
            rel = self._records[key]
            data = np.fromfile(os.path.join(self.path, rel), dtype=_RECORD_FLOAT)
            yield _check_length(data.astype(np.float64), self._vocab.size, rel)


class HttpProvider:
    """Client for the model-server sidecar.

    The provider binds to a vocabulary at construction: the sidecar's
    /info checksum and size must match, otherwise no perturbation can start.
    In-flight requests are bounded and idempotent calls are retried with
    exponential backoff.
    """

    kind = "http"

    def __init__(
        self,
        base_url: str,
        vocab: Vocabulary,
        timeout: float = 30.0,
        max_inflight: int = 8,
        retries: int = 3,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self._vocab = vocab
        self._retries = retries
        self._gate = threading.BoundedSemaphore(max_inflight)
        self._client = client or httpx.Client(base_url=self.base_url, timeout=timeout)
        info = self._request("GET", "/info").json()
        for field_name in ("model", "vocab_size", "dim", "mode", "vocab_sha256"):
            if field_name not in info:
                raise ProviderError(f"/info response missing field {field_name!r}")
        self.mode = info["mode"]
        self.info = info
        if int(info["vocab_size"]) != vocab.size:
            raise ProviderError(
                f"sidecar vocab_size {info['vocab_size']} != loaded vocabulary {vocab.size}"
            )
        if info["vocab_sha256"] != vocab.sha256:
            raise ProviderError(
                f"sidecar vocabulary checksum {info['vocab_sha256'][:12]}... does not match "
                f"loaded vocabulary {vocab.sha256[:12]}..."
            )

    def _request(self, method: str, path: str, json_body=None) -> httpx.Response:
        last_exc = None
        for attempt in range(self._retries):
            if attempt:
                time.sleep(0.1 * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._client.request(method, path, json=json_body)
            except httpx.TransportError as exc:
                last_exc = exc
                continue
            if resp.status_code >= 400:
                try:
                    detail = resp.json().get("error", resp.text)
                except ValueError:
                    detail = resp.text
                raise ProviderError(f"{method} {path} failed ({resp.status_code}): {detail}")
            return resp
        raise ProviderError(
            f"{method} {path} unreachable after {self._retries} attempts: {last_exc}"
        )

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    @property
    def descriptor(self) -> ProviderDescriptor:
        return ProviderDescriptor(
            kind=self.kind,
            vocabulary_hash=self.info["vocab_sha256"],
            model_name=self.info["model"],
            mode=self.mode,
            vocab_size=int(self.info["vocab_size"]),
            dim=int(self.info["dim"]),
        )

    def tokenize(self, text: str) -> list[int]:
        resp = self._request("POST", "/tokenize", {"text": text})
        return [int(i) for i in resp.json()["token_ids"]]

    def detokenize(self, token_ids) -> str:
        return " ".join(self._vocab.token_of(i) for i in token_ids)

    def context_logits(self, window: ContextWindow) -> np.ndarray:
        if window.mode != self.mode:
            raise ProviderError(
                f"window mode {window.mode!r} does not match provider mode {self.mode!r}"
            )
        resp = self._request(
            "POST",
            "/logits",
            {"token_ids": list(window.token_ids), "target_position": window.target_position},
        )
        vec = np.asarray(resp.json()["logits"], dtype=np.float64)
        return _check_length(vec, self._vocab.size, "/logits")

    def fetch_embeddings_bytes(self) -> bytes:
        return self._request("GET", "/embeddings").content

    def embedding_table(self) -> EmbeddingTable:
        matrix = parse_embeddings_binary(self.fetch_embeddings_bytes(), "/embeddings")
        if matrix.shape[0] != self._vocab.size:
            raise ProviderError(
                f"/embeddings rows {matrix.shape[0]} != vocabulary size {self._vocab.size}"
            )
        return EmbeddingTable(matrix)


class RecordingProvider:
    """Wraps another provider and captures its logit responses to disk.

    ``finalize()`` writes a complete file-provider directory that replays
    the recorded session byte-for-byte.
    """

    kind = "recording"

    def __init__(self, inner, out_dir):
        self.inner = inner
        self.out_dir = str(out_dir)
        self.mode = inner.mode
        self._records: dict[str, str] = {}
        os.makedirs(os.path.join(self.out_dir, "records"), exist_ok=True)

    def vocabulary(self) -> Vocabulary:
        return self.inner.vocabulary()

    @property
    def descriptor(self) -> ProviderDescriptor:
        return self.inner.descriptor

    def tokenize(self, text: str) -> list[int]:
        return self.inner.tokenize(text)

    def detokenize(self, token_ids) -> str:
        return self.inner.detokenize(token_ids)

    def context_logits(self, window: ContextWindow) -> np.ndarray:
        vec = self.inner.context_logits(window)
        key = f"{prompt_key(window.token_ids)}:{window.target_position}"
        if key not in self._records:
            rel = record_name(window.token_ids, window.target_position)
            vec.astype(_RECORD_FLOAT).tofile(os.path.join(self.out_dir, rel))
            self._records[key] = rel
        return vec

    def embedding_table(self) -> EmbeddingTable:
        return self.inner.embedding_table()

    def finalize(self) -> str:
        vocab = self.inner.vocabulary()
        desc = self.inner.descriptor
        write_vocabulary(vocab, os.path.join(self.out_dir, "vocab.txt"))
        if isinstance(self.inner, HttpProvider):
            raw = self.inner.fetch_embeddings_bytes()
        else:
            raw = embeddings_to_binary(self.inner.embedding_table())
        with open(os.path.join(self.out_dir, "embeddings.bin"), "wb") as f:
            f.write(raw)
        dump_canonical_json(
            {
                "dim": desc.dim,
                "mode": desc.mode,
                "model": desc.model_name,
                "vocab_sha256": desc.vocabulary_hash,
                "vocab_size": desc.vocab_size,
            },
            os.path.join(self.out_dir, "meta.json"),
        )
        dump_canonical_json({"records": self._records}, os.path.join(self.out_dir, "manifest.json"))
        return self.out_dir


def record_fixture_directory(provider, prompts, out_dir) -> str:
    """Record logits for every position of every prompt into a replay dir.

    ``prompts`` is an iterable of token-id sequences.
    """
    rec = RecordingProvider(provider, out_dir)
    for ids in prompts:
        ids = tuple(int(i) for i in ids)
        for pos in range(len(ids)):
            rec.context_logits(ContextWindow(ids, pos, provider.mode))
    return rec.finalize()


def write_fixture_directory(
    out_dir,
    vocab: Vocabulary,
    table: EmbeddingTable,
    mode: str,
    model_name: str,
    logit_records: dict,
) -> str:
    """Assemble a file-provider directory from in-memory pieces.

    ``logit_records`` maps (token_ids tuple, position) -> logit array.
    """
    if mode not in MODES:
        raise DataError(f"unknown provider mode {mode!r}")
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "records"), exist_ok=True)
    write_vocabulary(vocab, os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "embeddings.bin"), "wb") as f:
        f.write(embeddings_to_binary(table))
    records = {}
    for (ids, pos), vec in logit_records.items():
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (vocab.size,):
            raise DataError(
                f"record for position {pos}: length {vec.shape} != vocabulary {vocab.size}"
            )
        rel = record_name(ids, pos)
        vec.astype(_RECORD_FLOAT).tofile(os.path.join(out_dir, rel))
        records[f"{prompt_key(ids)}:{pos}"] = rel
    dump_canonical_json(
        {
            "dim": table.dim,
            "mode": mode,
            "model": model_name,
            "vocab_sha256": vocab.sha256,
            "vocab_size": vocab.size,
        },
        os.path.join(out_dir, "meta.json"),
    )
    dump_canonical_json({"records": records}, os.path.join(out_dir, "manifest.json"))
    return out_dir
