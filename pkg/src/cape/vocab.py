"""Vocabularies, embedding tables, token distances and the non-sensitive set.

File formats
------------
Vocabulary file: UTF-8 text, one token per line, ids assigned by line order.

Embedding text format: one line per token, ``token<TAB>v1 v2 ... vd``.

Embedding binary format: a single JSON header line
``{"dim": d, "vocab_size": n}\\n`` followed by ``n * d`` little-endian
32-bit floats in row-major order.  Loading either format of the same table
yields identical arrays (the text writer prints the exact float64 value of
each stored float32).

Non-sensitive list: one token per line; tokens absent from the active
vocabulary are skipped and reported.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError

_BINARY_FLOAT = np.dtype("<f4")


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token list with a bijective string <-> id mapping."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        mapping = {}
        for i, tok in enumerate(self.tokens):
            if tok in mapping:
                raise DataError(f"duplicate token {tok!r} (ids {mapping[tok]} and {i})")
            mapping[tok] = i
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise DataError(f"token {token!r} not in vocabulary") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise DataError(f"token id {token_id} out of range [0, {self.size})")
        return self.tokens[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __len__(self) -> int:
        return self.size

    @property
    def sha256(self) -> str:
        """Canonical content hash: sha256 of tokens joined by newlines.

        Providers use this to bind logit responses to the loaded vocabulary.
        """
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def load_vocabulary(path) -> Vocabulary:
    """Load a one-token-per-line vocabulary file."""
    with open(path, encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    if not tokens:
        raise DataError(f"vocabulary file {path} is empty")
    return Vocabulary(tuple(tokens))


def write_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.tokens:
            f.write(tok + "\n")


@dataclass(frozen=True)
class EmbeddingTable:
    """|V| x d matrix of token embedding coordinates (float64)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise DataError("embedding matrix contains non-finite values")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _check_table(matrix: np.ndarray, vocab: Vocabulary, path) -> EmbeddingTable:
    if matrix.shape[0] != vocab.size:
        raise DataError(
            f"{path}: {matrix.shape[0]} embedding rows for {vocab.size} vocabulary tokens"
        )
    return EmbeddingTable(matrix)


def load_embeddings_text(path, vocab: Vocabulary) -> EmbeddingTable:
    rows = []
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                token, values = line.split("\t", 1)
            except ValueError:
                raise DataError(f"{path}:{lineno + 1}: expected 'token<TAB>values'") from None
            if lineno < vocab.size and token != vocab.tokens[lineno]:
                raise DataError(
                    f"{path}:{lineno + 1}: token {token!r} does not match "
                    f"vocabulary token {vocab.tokens[lineno]!r}"
                )
            try:
                row = [float(v) for v in values.split()]
            except ValueError:
                raise DataError(f"{path}:{lineno + 1}: unparseable coordinate") from None
            if dim is None:
                dim = len(row)
            elif len(row) != dim:
                raise DataError(f"{path}:{lineno + 1}: ragged row ({len(row)} != {dim})")
            rows.append(row)
    if not rows:
        raise DataError(f"embedding file {path} is empty")
    matrix = np.array(rows, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise DataError(f"{path}: non-finite embedding value")
    return _check_table(matrix, vocab, path)


def parse_embeddings_binary(data: bytes, source="<bytes>") -> np.ndarray:
    """Parse the binary embedding format from raw bytes (float64 output)."""
    nl = data.find(b"\n")
    if nl < 0:
        raise DataError(f"{source}: missing binary header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
        n, d = int(header["vocab_size"]), int(header["dim"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{source}: bad binary header: {exc}") from None
    body = data[nl + 1:]
    expected = n * d * _BINARY_FLOAT.itemsize
    if len(body) != expected:
        raise DataError(f"{source}: expected {expected} payload bytes, found {len(body)}")
    matrix = np.frombuffer(body, dtype=_BINARY_FLOAT).reshape(n, d).astype(np.float64)
    if not np.isfinite(matrix).all():
        raise DataError(f"{source}: non-finite embedding value")
    return matrix


def load_embeddings_binary(path, vocab: Vocabulary) -> EmbeddingTable:
    with open(path, "rb") as f:
        data = f.read()
    return _check_table(parse_embeddings_binary(data, path), vocab, path)


def load_embeddings(path, vocab: Vocabulary) -> EmbeddingTable:
    """Load either embedding format, sniffing the first line."""
    with open(path, "rb") as f:
        first = f.readline()
    try:
        json.loads(first.decode("utf-8"))
        is_binary = True
    except (ValueError, UnicodeDecodeError):
        is_binary = False
    if is_binary:
        return load_embeddings_binary(path, vocab)
    return load_embeddings_text(path, vocab)


def embeddings_to_binary(table: EmbeddingTable) -> bytes:
    header = json.dumps(
        {"dim": table.dim, "vocab_size": table.size}, sort_keys=True, separators=(",", ":")
    )
    payload = table.matrix.astype(_BINARY_FLOAT).tobytes()
    return header.encode("utf-8") + b"\n" + payload


def write_embeddings_binary(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as f:
        f.write(embeddings_to_binary(table))


def write_embeddings_text(table: EmbeddingTable, vocab: Vocabulary, path) -> None:
    # Values are quantized to float32 first so the text and binary forms of
    # the same table load identically; repr() of the float64 cast round-trips.
    quantized = table.matrix.astype(_BINARY_FLOAT).astype(np.float64)
    with open(path, "w", encoding="utf-8") as f:
        for token, row in zip(vocab.tokens, quantized):
            f.write(token + "\t" + " ".join(repr(float(v)) for v in row) + "\n")


@dataclass(frozen=True)
class NonSensitiveSet:
    """Token ids exempt from perturbation, plus the list entries that were
    skipped because they are not in the active vocabulary."""

    token_ids: frozenset[int]
    missing: tuple[str, ...] = ()

    def __contains__(self, token_id: int) -> bool:
        return token_id in self.token_ids

    @property
    def skipped_count(self) -> int:
        return len(self.missing)


def _resolve_nonsensitive(entries, vocab: Vocabulary) -> NonSensitiveSet:
    ids, missing = set(), []
    for tok in entries:
        if tok in vocab:
            ids.add(vocab.id_of(tok))
        else:
            missing.append(tok)
    return NonSensitiveSet(frozenset(ids), tuple(missing))


def load_nonsensitive(path, vocab: Vocabulary) -> NonSensitiveSet:
    """Load a one-token-per-line non-sensitive list, dropping unknown tokens."""
    try:
        with open(path, encoding="utf-8") as f:
            entries = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    except OSError as exc:
        raise DataError(f"cannot read non-sensitive list {path}: {exc}") from None
    return _resolve_nonsensitive(entries, vocab)


def default_nonsensitive(vocab: Vocabulary) -> NonSensitiveSet:
    """The shipped stopword + punctuation list, filtered to the vocabulary."""
    text = resources.files("cape.data").joinpath("nonsensitive.txt").read_text("utf-8")
    return _resolve_nonsensitive([t for t in text.splitlines() if t], vocab)


@dataclass(frozen=True)
class DistanceRow:
    """Euclidean distances from one origin token to every vocabulary token."""

    origin: int
    distances: np.ndarray

    def __post_init__(self):
        self.distances.setflags(write=False)


def distance_row(table: EmbeddingTable, origin: int) -> DistanceRow:
    """Distances from ``origin`` to all tokens; exact 0.0 at the origin."""
    if not 0 <= origin < table.size:
        raise DataError(f"origin id {origin} out of range [0, {table.size})")
    diff = table.matrix - table.matrix[origin]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    dist[origin] = 0.0
    return DistanceRow(origin, dist)


class DistanceCache:
    """Lazy per-origin distance rows over one embedding table.

    Rows are deterministic, so concurrent insertion of the same origin is a
    benign race (last writer wins with an identical value).  The full |V|^2
    matrix is only materialized by :meth:`precompute_all`, which is opt-in
    because it can be very large for model-scale vocabularies.
    """

    def __init__(self, table: EmbeddingTable):
        self.table = table
        self._rows: dict[int, DistanceRow] = {}
        self._lock = threading.Lock()

    def row(self, origin: int) -> DistanceRow:
        row = self._rows.get(origin)
        if row is None:
            row = distance_row(self.table, origin)
            self._rows[origin] = row
        return row

    def __len__(self) -> int:
        return len(self._rows)

    def precompute_all(self) -> None:
        with self._lock:
            for origin in range(self.table.size):
                if origin not in self._rows:
                    self._rows[origin] = distance_row(self.table, origin)

    def max_distance(self) -> float:
        """Largest pairwise distance (forces full precomputation)."""
        self.precompute_all()
        return max(float(r.distances.max()) for r in self._rows.values())
