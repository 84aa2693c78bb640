"""Append-only on-disk embedding cache.

File layout (all integers little-endian)::

    b"EMBCACHE1\\n"
    u32 header length, then a JSON header {"model_id", "dim", "dtype"}
    records: sha256(text) [32 bytes] | vector [dim * 8 bytes, <f8] | crc32 [u32]

One file holds vectors for exactly one model id. A record whose checksum does
not match is ignored (so the text gets re-embedded on the next miss); a torn
record at the end of the file is cut off when the cache is opened for writing.
"""
from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedders import Embedder
from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

MAGIC = b"EMBCACHE1\n"
DTYPE = "<f8"
DIGEST_SIZE = 32


def text_key(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


class EmbeddingCache:
    def __init__(self, path: str | os.PathLike, model_id: str, dim: int, writable: bool = True):
        self.path = Path(path)
        self.model_id = model_id
        self.dim = dim
        self.writable = writable
        self._record_size = DIGEST_SIZE + dim * 8 + 4
        self._index: dict[bytes, np.ndarray] = {}
        self._lock = threading.RLock()
        self.n_corrupt = 0
        if self.path.exists() and self.path.stat().st_size > 0:
            self._load()
        elif writable:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._write_header()
        else:
            raise FileNotFoundError(self.path)

    @classmethod
    def for_embedder(cls, directory: str | os.PathLike, embedder: Embedder,
                     writable: bool = True) -> "EmbeddingCache":
        name = hashlib.sha256(embedder.model_id.encode()).hexdigest()[:16] + ".embcache"
        return cls(Path(directory) / name, embedder.model_id, embedder.dim, writable)

    def _header_bytes(self) -> bytes:
        header = json.dumps({"model_id": self.model_id, "dim": self.dim, "dtype": DTYPE}).encode()
        return MAGIC + struct.pack("<I", len(header)) + header

    def _write_header(self) -> None:
        with open(self.path, "wb") as fh:
            fh.write(self._header_bytes())

    def _load(self) -> None:
        with open(self.path, "rb") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            try:
                data = fh.read()
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        if not data.startswith(MAGIC):
            raise ConfigError(f"{self.path} is not an embedding cache file")
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(data[start:start + hlen])
        if header["model_id"] != self.model_id or header["dim"] != self.dim:
            raise ConfigError(
                f"cache {self.path} holds {header['model_id']} (d={header['dim']}), "
                f"expected {self.model_id} (d={self.dim})")
        if header.get("dtype", DTYPE) != DTYPE:
            raise ConfigError(f"unsupported cache dtype {header['dtype']}")
        offset = start + hlen
        n_full = (len(data) - offset) // self._record_size
        for i in range(n_full):
            rec = data[offset + i * self._record_size: offset + (i + 1) * self._record_size]
            body, (crc,) = rec[:-4], struct.unpack("<I", rec[-4:])
            if zlib.crc32(body) != crc:
                self.n_corrupt += 1
                logger.warning("%s: skipping corrupt record %d", self.path, i)
                continue
            vec = np.frombuffer(body[DIGEST_SIZE:], dtype=DTYPE).copy()
            self._index[body[:DIGEST_SIZE]] = vec
        good_end = offset + n_full * self._record_size
        if good_end != len(data):
            logger.warning("%s: %d trailing bytes from a torn write",
                           self.path, len(data) - good_end)
            if self.writable:
                with open(self.path, "r+b") as fh:
                    fcntl.flock(fh, fcntl.LOCK_EX)
                    try:
                        fh.truncate(good_end)
                    finally:
                        fcntl.flock(fh, fcntl.LOCK_UN)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, text: str) -> bool:
        return text_key(text) in self._index

    def get(self, text: str) -> np.ndarray | None:
        vec = self._index.get(text_key(text))
        return None if vec is None else vec.copy()

    def put_many(self, texts: Sequence[str], vectors: np.ndarray) -> None:
        if not self.writable:
            raise ConfigError(f"cache {self.path} was opened read-only")
        vectors = np.asarray(vectors, dtype=DTYPE)
        if vectors.shape != (len(texts), self.dim):
            raise ContractError(f"expected vectors of shape {(len(texts), self.dim)}")
        chunks = []
        with self._lock:
            for text, vec in zip(texts, vectors):
                key = text_key(text)
                if key in self._index:
                    continue
                body = key + vec.tobytes()
                chunks.append(body + struct.pack("<I", zlib.crc32(body)))
                self._index[key] = vec.copy()
            if not chunks:
                return
            with open(self.path, "ab") as fh:
                fcntl.flock(fh, fcntl.LOCK_EX)
                try:
                    fh.write(b"".join(chunks))
                    fh.flush()
                finally:
                    fcntl.flock(fh, fcntl.LOCK_UN)


def get_or_embed(texts: Sequence[str], cache: EmbeddingCache, embedder: Embedder) -> np.ndarray:
    """Serve ``texts`` from ``cache``, embedding and storing only the misses."""
    if cache.model_id != embedder.model_id:
        raise ConfigError(f"cache is for {cache.model_id}, embedder is {embedder.model_id}")
    texts = list(texts)
    out = np.empty((len(texts), embedder.dim))
    missing: dict[str, list[int]] = {}
    for i, text in enumerate(texts):
        vec = cache.get(text)
        if vec is None:
            missing.setdefault(text, []).append(i)
        else:
            out[i] = vec
    if missing:
        new_texts = list(missing)
        vecs = embedder.embed(new_texts)
        cache.put_many(new_texts, vecs)
        for text, vec in zip(new_texts, vecs):
            out[missing[text]] = vec
    return out


class CachedEmbedder(Embedder):
    """Embedder view that routes every query through an :class:`EmbeddingCache`.

    ``n_queries`` on this object counts requests; the wrapped embedder's own
    counter shows how many actually reached it.
    """

    def __init__(self, base: Embedder, cache: EmbeddingCache):
        super().__init__(base.descriptor)
        self.base = base
        self.cache = cache

    def _truncate(self, text: str) -> str:
        return text

    def _embed(self, texts: list[str]) -> np.ndarray:
        return get_or_embed(texts, self.cache, self.base)
