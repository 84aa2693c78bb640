"""Client for OpenAI-compatible ``/embeddings`` endpoints.

Request body is ``{"input": [...], "model": name}``; the response's
``data[i].embedding`` entries are re-ordered by ``data[i].index``.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx
import numpy as np

from .cache import EmbeddingCache, get_or_embed
from .embedders import Embedder, EmbedderDescriptor
from .errors import ConfigError, ContractError, TransportError

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class Endpoint:
    base_url: str
    model: str
    api_key: str | None = None

    @classmethod
    def from_env(cls, model: str) -> "Endpoint":
        base = os.environ.get("EMBED_API_BASE_URL")
        if not base:
            raise ConfigError("EMBED_API_BASE_URL is not set")
        return cls(base_url=base, model=model, api_key=os.environ.get("EMBED_API_KEY"))

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/embeddings"


class RemoteEmbedder(Embedder):
    def __init__(self, endpoint: Endpoint, dimension: int, unit_norm: bool = True,
                 max_input_tokens: int = 8191, max_attempts: int = 5,
                 backoff: float = 0.5, max_batch: int = 256, max_in_flight: int = 4,
                 timeout: float = 30.0, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(EmbedderDescriptor(
            model_id=f"remote:{endpoint.model}", dimension=dimension, unit_norm=unit_norm,
            max_input_tokens=max_input_tokens, kind="remote-api"))
        if max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        self.endpoint = endpoint
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.max_batch = max_batch
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self.n_attempts = 0

    def _headers(self) -> dict[str, str]:
        if self.endpoint.api_key:
            return {"Authorization": f"Bearer {self.endpoint.api_key}"}
        return {}

    def _embed(self, texts: list[str]) -> np.ndarray:
        parts = [self._post(texts[i:i + self.max_batch])
                 for i in range(0, len(texts), self.max_batch)]
        return np.concatenate(parts, axis=0)

    def _post(self, texts: list[str]) -> np.ndarray:
        payload = {"input": texts, "model": self.endpoint.model}
        last_error = ""
        for attempt in range(1, self.max_attempts + 1):
            with self._slots:
                self.n_attempts += 1
                try:
                    resp = self._client.post(self.endpoint.url, json=payload,
                                             headers=self._headers())
                except httpx.TransportError as exc:
                    resp, last_error = None, repr(exc)
            if resp is not None:
                if resp.status_code == 200:
                    logger.info("embeddings request succeeded on attempt %d", attempt)
                    return self._parse(resp.json(), len(texts))
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in RETRYABLE_STATUS:
                    raise TransportError(f"{self.endpoint.url}: {last_error}")
            logger.warning("embeddings attempt %d/%d failed: %s",
                           attempt, self.max_attempts, last_error)
            if attempt < self.max_attempts:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(
            f"{self.endpoint.url}: giving up after {self.max_attempts} attempts ({last_error})")

    def _parse(self, body: dict, n: int) -> np.ndarray:
        try:
            items = sorted(body["data"], key=lambda d: d["index"])
            vecs = np.array([d["embedding"] for d in items], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed embeddings response: {exc!r}") from exc
        if vecs.ndim != 2 or vecs.shape[0] != n:
            raise ContractError(f"expected {n} embeddings, got shape {vecs.shape}")
        if vecs.shape[1] != self.dim:
            raise ContractError(
                f"endpoint returned d={vecs.shape[1]}, descriptor says d={self.dim}")
        return vecs


def fetch_remote_embeddings(texts: Sequence[str], embedder: RemoteEmbedder,
                            cache: EmbeddingCache | None = None) -> np.ndarray:
    if cache is None:
        return embedder.embed(texts)
    return get_or_embed(texts, cache, embedder)
