"""Gaussian-noise defense: retrieval utility vs. reconstruction under noise."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document
from .embedders import Embedder, NoiseConfig, NoisyEmbedder, unwrap
from .errors import ContractError
from .inference import BeamConfig, Models
from .metrics import ReconstructionReport, evaluate_dataset

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.001, 0.01, 0.1, 1.0)


@dataclass
class Query:
    text: str
    relevant: dict[str, float]


@dataclass
class RetrievalTask:
    queries: list[Query]
    corpus: list[Document]
    name: str = "task"

    def __post_init__(self):
        if not self.queries:
            raise ContractError("a retrieval task needs at least one query")
        ids = {d.doc_id for d in self.corpus}
        if len(ids) != len(self.corpus):
            raise ContractError("corpus doc ids must be unique")
        for q in self.queries:
            missing = set(q.relevant) - ids
            if missing:
                raise ContractError(f"relevant ids not in corpus: {sorted(missing)[:5]}")


@dataclass
class TradeoffPoint:
    lam: float
    ndcg_at_10: float
    reconstruction: ReconstructionReport

    def row(self) -> dict:
        r = self.reconstruction
        return {"lambda": self.lam, "ndcg": self.ndcg_at_10, "bleu": r.bleu,
                "tf1": r.token_f1, "exact": r.exact, "cos": r.cos}


def ndcg_at_10(ranked_doc_ids: Sequence[str], relevance: dict[str, float], k: int = 10) -> float:
    """NDCG@k with linear gains and log2(rank + 1) discounts."""
    if len(set(ranked_doc_ids)) != len(ranked_doc_ids):
        raise ContractError("ranking contains duplicate doc ids")
    if not relevance:
        logger.warning("ndcg_at_10: empty relevance map, scoring 0")
        return 0.0
    dcg = sum(relevance.get(d, 0.0) / math.log2(i + 2) for i, d in enumerate(ranked_doc_ids[:k]))
    ideal = sorted(relevance.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def rank_corpus(query_vec: np.ndarray, corpus_vecs: np.ndarray, doc_ids: Sequence[str]) -> list[str]:
    """Doc ids by cosine descending; ties broken by ascending doc id."""
    q = query_vec / np.linalg.norm(query_vec)
    c = corpus_vecs / np.linalg.norm(corpus_vecs, axis=1, keepdims=True)
    scores = c @ q
    order = np.lexsort((np.asarray(doc_ids), -scores))
    return [doc_ids[i] for i in order]


def embed_corpus(task: RetrievalTask, embedder: Embedder) -> np.ndarray:
    return embedder.embed([d.text for d in task.corpus])


def retrieval_scores(embedder: Embedder, task: RetrievalTask,
                     corpus_vecs: np.ndarray | None = None) -> np.ndarray:
    """Per-query NDCG@10. Queries go through ``embedder`` (noisy if wrapped);
    the corpus is embedded once with the underlying clean embedder."""
    if corpus_vecs is None:
        corpus_vecs = embed_corpus(task, unwrap(embedder))
    doc_ids = [d.doc_id for d in task.corpus]
    qv = embedder.embed([q.text for q in task.queries])
    return np.array([ndcg_at_10(rank_corpus(v, corpus_vecs, doc_ids), q.relevant)
                     for v, q in zip(qv, task.queries)])


def run_retrieval(embedder: Embedder, task: RetrievalTask,
                  corpus_vecs: np.ndarray | None = None) -> float:
    return float(retrieval_scores(embedder, task, corpus_vecs).mean())


def self_retrieval_task(docs: Sequence, n_queries: int, seed: int = 0,
                        name: str = "self-retrieval") -> RetrievalTask:
    """Each query is the exact text of one corpus document, its only relevant hit."""
    docs = [d if isinstance(d, Document) else Document(d.doc_id, d.text) for d in docs]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(docs), size=min(n_queries, len(docs)), replace=False)
    return RetrievalTask([Query(docs[i].text, {docs[i].doc_id: 1.0}) for i in picks],
                         list(docs), name)


def random_ranking_ndcg(task: RetrievalTask, n_samples: int = 2000, seed: int = 0) -> float:
    """Monte-Carlo expected NDCG@10 under uniformly random rankings."""
    rng = np.random.default_rng(seed)
    ids = np.array([d.doc_id for d in task.corpus])
    vals = []
    for _ in range(n_samples):
        q = task.queries[rng.integers(len(task.queries))]
        vals.append(ndcg_at_10(list(rng.permutation(ids)[:10]), q.relevant))
    return float(np.mean(vals))


def noise_sweep(embedder: Embedder, lambdas: Sequence[float], eval_dataset: Sequence,
                retrieval_task: RetrievalTask, attacker: Models,
                config: BeamConfig | None = None, seed: int = 0,
                out_dir=None) -> list[TradeoffPoint]:
    """Reconstruction and retrieval quality at each noise level.

    The attacker was trained on clean embeddings. At each lambda the eval
    targets are re-embedded through the noisy embedder and the attacker's
    feedback queries go to that same noisy embedder.
    """
    config = config or BeamConfig(width=1, max_rounds=10)
    corpus_vecs = embed_corpus(retrieval_task, embedder)
    texts = [ex.text for ex in eval_dataset]
    points = []
    for lam in lambdas:
        noisy = NoisyEmbedder(embedder, NoiseConfig(lam, seed))
        targets = noisy.embed(texts)
        report = evaluate_dataset(attacker, eval_dataset, config, embedder, targets=targets,
                                  attack_embedder=noisy, dataset_id=f"noise lambda={lam:g}")
        query_embedder = NoisyEmbedder(embedder, NoiseConfig(lam, seed + 1))
        ndcg = run_retrieval(query_embedder, retrieval_task, corpus_vecs)
        logger.info("lambda=%g ndcg=%.3f bleu=%.1f cos=%.3f", lam, ndcg, report.bleu, report.cos)
        points.append(TradeoffPoint(lam, ndcg, report))
    if out_dir is not None:
        write_tradeoff(points, out_dir)
    return points


def write_tradeoff(points: Sequence[TradeoffPoint], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "tradeoff.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lambda", "ndcg", "bleu", "tf1", "exact", "cos"])
        w.writeheader()
        for p in points:
            w.writerow(p.row())
    from .plots import tradeoff_plot
    png = out / "tradeoff.png"
    tradeoff_plot(points, png)
    return csv_path, png
