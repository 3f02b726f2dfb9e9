"""Pretrained word vectors in the plain-text ``token f1 f2 ... fD`` format.

The table is immutable once built. Tokens missing from the file resolve to the
mean of all stored vectors.
"""
from __future__ import annotations

import io
import math
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    DuplicateToken,
    EmptyFile,
    EmptyToken,
    InconsistentDimension,
    KTooLarge,
    LengthMismatch,
    MalformedNumber,
    UnknownToken,
)


class EmbeddingTable:
    """Ordered token -> vector table with a mean-vector fallback."""

    def __init__(self, tokens: Sequence[str], vectors):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise EmptyFile("embedding table needs at least one non-empty vector")
        if len(tokens) != vectors.shape[0]:
            raise LengthMismatch(f"{len(tokens)} tokens for {vectors.shape[0]} vectors")
        if not np.all(np.isfinite(vectors)):
            raise MalformedNumber("embedding vectors must be finite")
        index = {}
        for i, tok in enumerate(tokens):
            if not tok:
                raise EmptyToken(f"empty token at row {i}")
            if tok in index:
                raise DuplicateToken(f"duplicate token {tok!r} at row {i}")
            index[tok] = i
        self._tokens = tuple(tokens)
        self._index = index
        vectors.setflags(write=False)
        self._vectors = vectors
        fallback = vectors.mean(axis=0)
        fallback.setflags(write=False)
        self._fallback = fallback

    @property
    def dimension(self) -> int:
        return self._vectors.shape[1]

    @property
    def tokens(self) -> tuple:
        return self._tokens

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def fallback(self) -> np.ndarray:
        return self._fallback

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def index_of(self, token: str) -> int:
        """Row of ``token``, or ``len(self)`` (the fallback row) when out of vocabulary."""
        if not token:
            raise EmptyToken("token must be non-empty")
        return self._index.get(token, len(self._tokens))

    def lookup(self, token: str) -> np.ndarray:
        if not token:
            raise EmptyToken("token must be non-empty")
        i = self._index.get(token)
        if i is None:
            return self._fallback
        return self._vectors[i]

    def matrix_with_fallback(self) -> np.ndarray:
        """``(V + 1, D)`` copy of the vectors with the fallback as the last row."""
        return np.vstack([self._vectors, self._fallback[None, :]])

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self._vectors.tobytes()).hexdigest()

    def to_text(self) -> str:
        buf = io.StringIO()
        write_embedding_file(self, buf)
        return buf.getvalue()


def parse_embedding_file(stream: TextIO | Iterable[str]) -> EmbeddingTable:
    """Parse whitespace-format vectors. D is taken from the first line."""
    tokens = []
    rows = []
    dim = None
    seen = set()
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split(" ")
        tok, fields = parts[0], parts[1:]
        if not tok:
            raise MalformedNumber(f"line {lineno}: missing token")
        if dim is None:
            dim = len(fields)
            if dim == 0:
                raise InconsistentDimension(f"line {lineno}: no vector components")
        elif len(fields) != dim:
            raise InconsistentDimension(
                f"line {lineno}: expected {dim} components, got {len(fields)}"
            )
        if tok in seen:
            raise DuplicateToken(f"line {lineno}: duplicate token {tok!r}")
        try:
            vec = [float(f) for f in fields]
        except ValueError as exc:
            raise MalformedNumber(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vec):
            raise MalformedNumber(f"line {lineno}: non-finite component")
        seen.add(tok)
        tokens.append(tok)
        rows.append(vec)
    if not tokens:
        raise EmptyFile("no embedding lines found")
    return EmbeddingTable(tokens, rows)


def load_embedding_file(path) -> EmbeddingTable:
    with open(path, encoding="utf-8") as f:
        return parse_embedding_file(f)


def write_embedding_file(table: EmbeddingTable, stream: TextIO) -> None:
    # 17 significant digits round-trip every double exactly
    for tok, vec in zip(table.tokens, table.vectors):
        stream.write(tok + " " + " ".join("%.17g" % v for v in vec) + "\n")


def save_embedding_file(table: EmbeddingTable, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_embedding_file(table, f)


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between ``u`` and ``v``; 0.0 if either has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise LengthMismatch(f"vector lengths differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def nearest_neighbors(table: EmbeddingTable, token: str, k: int) -> list:
    """The ``k`` most cosine-similar other tokens, ties broken by token order."""
    if token not in table:
        raise UnknownToken(f"token {token!r} not in vocabulary")
    if k < 1 or k > len(table) - 1:
        raise KTooLarge(f"k={k} but only {len(table) - 1} other tokens exist")
    q = table.vectors[table.index_of(token)]
    norms = np.linalg.norm(table.vectors, axis=1)
    qn = np.linalg.norm(q)
    dots = table.vectors @ q
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where((norms == 0) | (qn == 0), 0.0, dots / (norms * qn))
    sims = np.clip(sims, -1.0, 1.0)
    cands = [(tok, float(s)) for tok, s in zip(table.tokens, sims) if tok != token]
    cands.sort(key=lambda ts: (-ts[1], ts[0]))
    return cands[:k]
