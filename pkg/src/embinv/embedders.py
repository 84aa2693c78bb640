"""Black-box text embedders.

Every embedder is query-only: it maps a batch of strings to a ``(n, d)`` float64
array and keeps a count of how many texts it has been asked to embed. Nothing
here exposes gradients.
"""
from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tokens import PAD, get_tokenizer

logger = logging.getLogger(__name__)

KINDS = ("local-encoder", "remote-api", "synthetic")
UNIT_NORM_ATOL = 1e-5


@dataclass(frozen=True)
class EmbedderDescriptor:
    model_id: str
    dimension: int
    unit_norm: bool = True
    max_input_tokens: int = 512
    kind: str = "synthetic"
    tokenizer_id: str = "whitespace"
    # Stand-in text used for phi(empty) when the embedder rejects "".
    empty_text: str = PAD

    def __post_init__(self):
        if self.dimension <= 0:
            raise ContractError(f"dimension must be positive, got {self.dimension}")
        if self.max_input_tokens <= 0:
            raise ContractError("max_input_tokens must be positive")
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class NoiseConfig:
    lam: float
    seed: int = 0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ContractError(f"noise lambda must be >= 0, got {self.lam}")


class Embedder:
    """Base class. Subclasses implement :meth:`_embed` on already-truncated text."""

    def __init__(self, descriptor: EmbedderDescriptor):
        self.descriptor = descriptor
        self._tokenizer = get_tokenizer(descriptor.tokenizer_id)
        self._lock = threading.Lock()
        self.n_queries = 0
        self.n_calls = 0
        self.truncations: list[tuple[int, int]] = []

    @property
    def model_id(self) -> str:
        return self.descriptor.model_id

    @property
    def dim(self) -> int:
        return self.descriptor.dimension

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return self.embed(texts)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if isinstance(texts, str):
            raise ContractError("embed() takes a list of strings, not a string")
        texts = list(texts)
        if not texts:
            raise ContractError("batch must contain at least one text")
        for t in texts:
            if not t:
                raise ContractError("cannot embed an empty string")
        texts = [self._truncate(t) for t in texts]
        with self._lock:
            self.n_queries += len(texts)
            self.n_calls += 1
        out = np.asarray(self._embed(texts), dtype=np.float64)
        self._check(out, len(texts))
        return out

    def embed_empty(self) -> np.ndarray:
        """phi of the empty hypothesis, via the descriptor's stand-in text."""
        return self.embed([self.descriptor.empty_text])[0]

    def _truncate(self, text: str) -> str:
        limit = self.descriptor.max_input_tokens
        toks = self._tokenizer.tokenize(text)
        if len(toks) <= limit:
            return text
        with self._lock:
            self.truncations.append((len(toks), limit))
        logger.info("%s: truncated input from %d to %d tokens",
                    self.model_id, len(toks), limit)
        return self._tokenizer.detokenize(toks[:limit])

    def _check(self, out: np.ndarray, n: int) -> None:
        if out.shape != (n, self.dim):
            raise ContractError(
                f"{self.model_id}: expected output shape {(n, self.dim)}, got {out.shape}")
        if not np.all(np.isfinite(out)):
            raise ContractError(f"{self.model_id}: non-finite embedding values")
        if self.descriptor.unit_norm:
            norms = np.linalg.norm(out, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_ATOL):
                raise ContractError(f"{self.model_id}: declared unit_norm but got norms {norms}")

    def _embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class SyntheticEmbedder(Embedder):
    """Bag-of-tokens embedder with fixed random Gaussian token rows.

    Each token string gets a row drawn from a generator keyed on
    ``(seed, sha256(token))``, so rows do not depend on any vocabulary. A text
    embeds to the L2-normalized mean of its token rows. Rows are summed in
    sorted token order, which makes the output exactly permutation invariant.
    """

    def __init__(self, dim: int = 32, seed: int = 0, tokenizer_id: str = "whitespace",
                 max_input_tokens: int = 512, model_id: str | None = None):
        model_id = model_id or f"synthetic-d{dim}-seed{seed}-{tokenizer_id}"
        super().__init__(EmbedderDescriptor(
            model_id=model_id, dimension=dim, unit_norm=True,
            max_input_tokens=max_input_tokens, kind="synthetic",
            tokenizer_id=tokenizer_id))
        self.seed = seed
        self._rows: dict[str, np.ndarray] = {}

    def token_row(self, token: str) -> np.ndarray:
        row = self._rows.get(token)
        if row is None:
            key = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            row = np.random.default_rng([self.seed, key]).standard_normal(self.dim)
            self._rows[token] = row
        return row

    def _embed(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            toks = sorted(self._tokenizer.tokenize(text))
            if not toks:
                raise ContractError(f"text {text!r} has no tokens")
            mean = np.sum([self.token_row(t) for t in toks], axis=0) / len(toks)
            out[i] = mean / np.linalg.norm(mean)
        return out


class CallableEmbedder(Embedder):
    """Wraps any local ``texts -> array`` function, e.g. a sentence-transformers model."""

    def __init__(self, fn: Callable[[list[str]], np.ndarray], descriptor: EmbedderDescriptor):
        super().__init__(descriptor)
        self._fn = fn

    def _embed(self, texts: list[str]) -> np.ndarray:
        return self._fn(texts)

    @classmethod
    def from_sentence_transformers(cls, name: str, max_input_tokens: int = 512,
                                   normalize: bool = True) -> "CallableEmbedder":
        from sentence_transformers import SentenceTransformer

        model = SentenceTransformer(name)
        desc = EmbedderDescriptor(
            model_id=f"st:{name}", dimension=model.get_sentence_embedding_dimension(),
            unit_norm=normalize, max_input_tokens=max_input_tokens, kind="local-encoder")
        return cls(lambda t: model.encode(t, normalize_embeddings=normalize), desc)


class NoisyEmbedder(Embedder):
    """``phi(x) + lam * eps`` with ``eps`` i.i.d. standard normal per coordinate.

    Noise comes from one generator seeded at construction, so repeated calls on
    the same text give different vectors. No renormalization is applied.
    """

    def __init__(self, base: Embedder, noise: NoiseConfig):
        desc = replace(base.descriptor,
                       model_id=f"{base.model_id}+noise(lam={noise.lam!r},seed={noise.seed})",
                       unit_norm=False)
        super().__init__(desc)
        self.base = base
        self.noise = noise
        self._rng = np.random.default_rng(noise.seed)

    def _truncate(self, text: str) -> str:
        return text  # the base embedder truncates

    def _embed(self, texts: list[str]) -> np.ndarray:
        clean = self.base.embed(texts)
        if self.noise.lam == 0:
            return clean
        return clean + self.noise.lam * self._rng.standard_normal(clean.shape)


def unwrap(embedder: Embedder) -> Embedder:
    while isinstance(embedder, NoisyEmbedder):
        embedder = embedder.base
    return embedder


def embed_batch(texts: Sequence[str], embedder: Embedder) -> np.ndarray:
    return embedder.embed(texts)


def noisy_embed(embedder: Embedder, noise: NoiseConfig, texts: Sequence[str]) -> np.ndarray:
    return NoisyEmbedder(embedder, noise).embed(texts)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(target, rows) -> np.ndarray:
    """Cosine of each row of ``rows`` against one ``target`` vector."""
    target = np.asarray(target, dtype=np.float64)
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != target.shape[0]:
        raise ContractError(f"dimension mismatch: {rows.shape[1]} vs {target.shape[0]}")
    denom = np.linalg.norm(rows, axis=1) * np.linalg.norm(target)
    if np.any(denom == 0):
        raise ContractError("cosine similarity is undefined for a zero vector")
    return np.clip(rows @ target / denom, -1.0, 1.0)
