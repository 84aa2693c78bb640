"""Corpora, inversion datasets and hypothesis datasets."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cache import EmbeddingCache, get_or_embed, text_key
from .embedders import Embedder
from .errors import ConfigError
from .tokens import TokenSequence, get_tokenizer

logger = logging.getLogger(__name__)


@dataclass
class Document:
    doc_id: str
    text: str
    name_spans: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class TruncatedDocument:
    doc_id: str
    tokens: TokenSequence
    tokenizer_id: str
    name_spans: list[tuple[str, str]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return self.tokens.text


@dataclass
class InversionExample:
    doc_id: str
    tokens: TokenSequence
    target_embedding: np.ndarray
    tokenizer_id: str = "whitespace"
    name_spans: list[tuple[str, str]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return self.tokens.text


@dataclass
class HypothesisRecord:
    example: InversionExample
    hypothesis_tokens: TokenSequence
    hypothesis_embedding: np.ndarray

    @property
    def cosine(self) -> float:
        from .embedders import cosine_similarity
        return cosine_similarity(self.example.target_embedding, self.hypothesis_embedding)


@dataclass
class IngestResult:
    documents: list[TruncatedDocument]
    n_dropped_empty: int = 0
    bad_lines: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)


def truncate(tokens: TokenSequence, max_tokens: int, tokenizer_id: str) -> TokenSequence:
    if len(tokens) <= max_tokens:
        return tokens
    return get_tokenizer(tokenizer_id).from_tokens(tokens.tokens[:max_tokens])


def ingest_corpus(path: str | os.PathLike, tokenizer_id: str, max_tokens: int) -> IngestResult:
    """Read a JSONL corpus of ``{doc_id, text, name_spans?}`` and truncate each text."""
    tok = get_tokenizer(tokenizer_id)
    if max_tokens < 1:
        raise ConfigError("max_tokens must be >= 1")
    result = IngestResult([])
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id, text = str(rec["doc_id"]), rec["text"]
                if not isinstance(text, str):
                    raise TypeError("text must be a string")
                spans = [tuple(p) for p in rec.get("name_spans") or []]
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("%s:%d: skipping malformed line (%s)", path, lineno, exc)
                result.bad_lines.append(lineno)
                continue
            if doc_id in seen:
                logger.warning("%s:%d: duplicate doc_id %r skipped", path, lineno, doc_id)
                result.bad_lines.append(lineno)
                continue
            seen.add(doc_id)
            seq = tok.encode(text, max_tokens)
            if len(seq) == 0:
                result.n_dropped_empty += 1
                continue
            result.documents.append(TruncatedDocument(doc_id, seq, tokenizer_id, spans))
    if result.n_dropped_empty:
        logger.info("%s: dropped %d documents that were empty after truncation",
                    path, result.n_dropped_empty)
    return result


def write_corpus(docs: Iterable[Document], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            rec = {"doc_id": d.doc_id, "text": d.text}
            if d.name_spans:
                rec["name_spans"] = [list(p) for p in d.name_spans]
            fh.write(json.dumps(rec) + "\n")


def _embed(texts: list[str], embedder: Embedder, cache: EmbeddingCache | None) -> np.ndarray:
    if cache is None:
        return embedder.embed(texts)
    return get_or_embed(texts, cache, embedder)


def build_inversion_dataset(docs: Iterable[TruncatedDocument], embedder: Embedder,
                            cache: EmbeddingCache | None = None, workers: int = 1,
                            chunk_size: int = 256) -> list[InversionExample]:
    docs = list(docs)
    texts = [d.tokens.text for d in docs]
    chunks = [texts[i:i + chunk_size] for i in range(0, len(texts), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _embed(c, embedder, cache), chunks))
    else:
        parts = [_embed(c, embedder, cache) for c in chunks]
    vecs = np.concatenate(parts) if parts else np.empty((0, embedder.dim))
    return [InversionExample(d.doc_id, d.tokens, v, d.tokenizer_id, list(d.name_spans))
            for d, v in zip(docs, vecs)]


def generate_hypothesis_dataset(base_model, dataset: Sequence[InversionExample],
                                embedder: Embedder, batch_size: int = 256
                                ) -> list[HypothesisRecord]:
    """Greedy base-model hypotheses x0 for every example, each re-embedded."""
    import torch

    tok = get_tokenizer(base_model.config.tokenizer_id)
    empty = base_model.as_tensor(embedder.embed_empty())
    records: list[HypothesisRecord] = []
    base_model.eval()
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i:i + batch_size]
        e = base_model.as_tensor(np.stack([ex.target_embedding for ex in chunk]))
        hyp_ids = torch.zeros((len(chunk), 0), dtype=torch.long, device=base_model.device)
        outs = base_model.greedy(e, empty[None].expand_as(e), hyp_ids)
        seqs = [tok.from_tokens(o) for o in outs]
        vecs = embed_hypotheses([s.text for s in seqs], embedder)
        records.extend(HypothesisRecord(ex, s, v) for ex, s, v in zip(chunk, seqs, vecs))
    return records


def embed_hypotheses(texts: Sequence[str], embedder: Embedder) -> np.ndarray:
    """Embed texts, mapping empty hypotheses to the embedder's empty stand-in."""
    texts = [t if t else embedder.descriptor.empty_text for t in texts]
    return embedder.embed(texts)


def split_train_eval(dataset: Sequence, eval_fraction: float, seed: int = 0):
    if not 0 < eval_fraction < 1:
        raise ConfigError("eval_fraction must be in (0, 1)")
    n = len(dataset)
    n_eval = int(round(n * eval_fraction))
    if n_eval < 1 or n_eval >= n:
        raise ConfigError(f"dataset of {n} examples is too small for eval_fraction={eval_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    eval_idx = set(perm[:n_eval].tolist())
    train = [x for i, x in enumerate(dataset) if i not in eval_idx]
    ev = [x for i, x in enumerate(dataset) if i in eval_idx]
    return train, ev


# -- manifests -----------------------------------------------------------------

def write_manifest(dataset: Sequence[InversionExample], path: str | os.PathLike,
                   model_id: str) -> None:
    """One JSON line per example; vectors are referenced by cache key, not inlined."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps({
                "doc_id": ex.doc_id, "text": ex.text, "tokens": list(ex.tokens.tokens),
                "tokenizer_id": ex.tokenizer_id, "model_id": model_id,
                "cache_key": text_key(ex.text).hex(),
                "name_spans": [list(p) for p in ex.name_spans],
            }) + "\n")


def read_manifest(path: str | os.PathLike, cache: EmbeddingCache,
                  embedder: Embedder | None = None) -> list[InversionExample]:
    out = []
    missing = []
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    for r in rows:
        if r["model_id"] != cache.model_id:
            raise ConfigError(f"manifest row for {r['model_id']}, cache is {cache.model_id}")
        vec = cache.get(r["text"])
        if vec is None:
            missing.append(r["text"])
    if missing:
        if embedder is None:
            raise ConfigError(f"{len(missing)} manifest texts are missing from the cache")
        get_or_embed(missing, cache, embedder)
    for r in rows:
        seq = TokenSequence(tuple(r["tokens"]), r["text"])
        out.append(InversionExample(r["doc_id"], seq, cache.get(r["text"]), r["tokenizer_id"],
                                    [tuple(p) for p in r.get("name_spans", [])]))
    return out


# -- synthetic corpora -----------------------------------------------------------

def synthetic_vocabulary(vocab_size: int) -> list[str]:
    width = len(str(vocab_size - 1))
    return [f"w{i:0{width}d}" for i in range(vocab_size)]


def synthetic_corpus(n: int, vocab_size: int = 256, max_len: int = 8, min_len: int = 1,
                     branching: int | None = 4, seed: int = 0,
                     unique_bags: bool = False) -> list[Document]:
    """Unique token sequences from a sparse first-order Markov chain.

    Every token has ``branching`` allowed successors (uniform), the first token
    is uniform over the vocabulary, and lengths are uniform in
    ``[min_len, max_len]``. ``branching=None`` gives i.i.d. uniform tokens.
    With ``unique_bags`` no two sequences share a token multiset, so a
    bag-of-tokens embedder maps every document to a distinct vector.
    """
    if n < 1 or not 1 <= min_len <= max_len:
        raise ConfigError("need n >= 1 and 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    vocab = synthetic_vocabulary(vocab_size)
    succ = None
    if branching is not None:
        succ = np.stack([rng.choice(vocab_size, size=branching, replace=False)
                         for _ in range(vocab_size)])
    seen: set[str] = set()
    docs: list[Document] = []
    attempts = 0
    while len(docs) < n:
        attempts += 1
        if attempts > 100 * n:
            raise ConfigError("could not draw enough unique synthetic sequences")
        length = int(rng.integers(min_len, max_len + 1))
        ids = [int(rng.integers(vocab_size))]
        for _ in range(length - 1):
            nxt = rng.integers(vocab_size) if succ is None else rng.choice(succ[ids[-1]])
            ids.append(int(nxt))
        text = " ".join(vocab[i] for i in ids)
        key = " ".join(vocab[i] for i in sorted(ids)) if unique_bags else text
        if key in seen:
            continue
        seen.add(key)
        docs.append(Document(f"syn-{len(docs):06d}", text))
    return docs


def documents_to_truncated(docs: Iterable[Document], tokenizer_id: str,
                           max_tokens: int) -> list[TruncatedDocument]:
    tok = get_tokenizer(tokenizer_id)
    out = []
    for d in docs:
        seq = tok.encode(d.text, max_tokens)
        if len(seq):
            out.append(TruncatedDocument(d.doc_id, seq, tokenizer_id, list(d.name_spans)))
    return out
