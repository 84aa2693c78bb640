"""Desk-scale inversion benchmark shared by the acceptance suite and the demos.

A synthetic Markov-chain corpus (2,000 sequences, vocabulary 256, length <= 8)
embedded by the seeded bag-of-tokens embedder (d=32), a small base inverter
selected by held-out loss, and a corrector trained to convergence on the base
model's training-set hypotheses. A second corrector with the same recipe but no
access to phi(x_t) (text-only) serves the feedback ablation. Trained checkpoints are cached on disk keyed
by a hash of the configuration, so repeated runs only pay for inference.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (InversionExample, build_inversion_dataset, documents_to_truncated,
                     generate_hypothesis_dataset, split_train_eval, synthetic_corpus,
                     synthetic_vocabulary)
from .embedders import SyntheticEmbedder
from .inference import BeamConfig, CorrectionTrace, Models, invert_sbeam_batch
from .models import InverterConfig
from .tokens import Vocab
from .training import Hyperparams, load_model, save_checkpoint, train_base, train_corrector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSize:
    d_enc: int
    s: int
    n_heads: int
    layers: int
    ffn_dim: int


@dataclass(frozen=True)
class BenchmarkConfig:
    n_docs: int = 2000
    vocab_size: int = 256
    max_len: int = 8
    branching: int = 4
    dim: int = 32
    seed: int = 0
    heldout_fraction: float = 0.1
    slice_size: int = 200
    base: ModelSize = ModelSize(d_enc=32, s=2, n_heads=4, layers=1, ffn_dim=64)
    corrector: ModelSize = ModelSize(d_enc=128, s=4, n_heads=4, layers=2, ffn_dim=256)
    base_epochs: int = 40         # weights come from the best held-out epoch within this budget
    corrector_epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_cache_dir() -> Path:
    env = os.environ.get("EMBINV_BENCH_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "embinv" / "benchmark"


@dataclass
class TinyBenchmark:
    config: BenchmarkConfig
    embedder: SyntheticEmbedder
    train: list[InversionExample]
    heldout: list[InversionExample]
    models: Models
    text_only: Models
    info: dict = field(default_factory=dict)

    @property
    def slice(self) -> list[InversionExample]:
        """Fixed sample of training sequences used as the evaluation slice."""
        rng = np.random.default_rng(self.config.seed + 1)
        idx = np.sort(rng.choice(len(self.train), size=self.config.slice_size, replace=False))
        return [self.train[i] for i in idx]

    def invert(self, data: Sequence[InversionExample], config: BeamConfig,
               embedder=None, models: Models | None = None) -> list[CorrectionTrace]:
        targets = np.stack([ex.target_embedding for ex in data])
        return invert_sbeam_batch(models or self.models, embedder or self.embedder, targets, config)

    @staticmethod
    def exact_rate(traces: Sequence[CorrectionTrace], data: Sequence[InversionExample]) -> float:
        """Percent of traces whose final text equals the source text."""
        hits = [t.final.hypothesis.text == ex.text for t, ex in zip(traces, data)]
        return 100.0 * float(np.mean(hits))

    def base_cosines(self, data: Sequence[InversionExample]) -> np.ndarray:
        recs = generate_hypothesis_dataset(self.models.base, list(data), self.embedder)
        return np.array([r.cosine for r in recs])


def _inverter_config(vocab: list[str], cfg: BenchmarkConfig, size: ModelSize,
                     role: str, feedback: bool = True) -> InverterConfig:
    return InverterConfig(vocab=vocab, embed_dim=cfg.dim, role=role, d_enc=size.d_enc, s=size.s,
                          n_heads=size.n_heads, enc_layers=size.layers, dec_layers=size.layers,
                          ffn_dim=size.ffn_dim, max_tokens=cfg.max_len, feedback=feedback)


def build_benchmark(config: BenchmarkConfig | None = None, cache_dir=None,
                    retrain: bool = False) -> TinyBenchmark:
    """Data, embedder and trained models; trains only when no cached checkpoint exists."""
    cfg = config or BenchmarkConfig()
    emb = SyntheticEmbedder(dim=cfg.dim, seed=cfg.seed)
    docs = synthetic_corpus(cfg.n_docs, cfg.vocab_size, cfg.max_len, branching=cfg.branching,
                            seed=cfg.seed, unique_bags=True)
    data = build_inversion_dataset(documents_to_truncated(docs, "whitespace", cfg.max_len), emb)
    train, heldout = split_train_eval(data, cfg.heldout_fraction, seed=cfg.seed)
    root = Path(cache_dir or default_cache_dir()) / cfg.key()
    base_dir, corr_dir, text_dir = root / "base", root / "corrector", root / "corrector_text_only"
    info_path = root / "info.json"
    vocab = Vocab.build([synthetic_vocabulary(cfg.vocab_size)]).tokens
    hp = dict(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    if retrain or not (info_path.exists() and (corr_dir / "weights.pt").exists()):
        t0 = time.time()
        logger.info("training benchmark base model (%d examples)", len(train))
        base = train_base(train, _inverter_config(vocab, cfg, cfg.base, "base"),
                          Hyperparams(epochs=cfg.base_epochs, keep_best=True, **hp),
                          emb.embed_empty(), eval_dataset=heldout)
        save_checkpoint(base, base_dir)
        records = generate_hypothesis_dataset(base.model, train, emb)
        t1 = time.time()
        logger.info("training benchmark corrector")
        corr = train_corrector(records, _inverter_config(vocab, cfg, cfg.corrector, "corrector"),
                               Hyperparams(epochs=cfg.corrector_epochs, **hp))
        save_checkpoint(corr, corr_dir)
        info = {"config": asdict(cfg), "base_best_step": base.best_step,
                "base_best_eval_loss": base.best_eval_loss,
                "mean_hypothesis_cosine": float(np.mean([r.cosine for r in records])),
                "corrector_final_loss": corr.history[-1]["loss"],
                "base_seconds": round(t1 - t0, 1), "corrector_seconds": round(time.time() - t1, 1)}
        info_path.write_text(json.dumps(info, indent=2))
    info = json.loads(info_path.read_text())
    base_model = load_model(base_dir)
    if retrain or not (text_dir / "weights.pt").exists():
        t0 = time.time()
        logger.info("training benchmark text-only corrector")
        records = generate_hypothesis_dataset(base_model, train, emb)
        text = train_corrector(records, _inverter_config(vocab, cfg, cfg.corrector, "corrector",
                                                         feedback=False),
                               Hyperparams(epochs=cfg.corrector_epochs, **hp))
        save_checkpoint(text, text_dir)
        info["text_only_final_loss"] = text.history[-1]["loss"]
        info["text_only_seconds"] = round(time.time() - t0, 1)
        info_path.write_text(json.dumps(info, indent=2))
    models = Models(base_model, load_model(corr_dir))
    return TinyBenchmark(cfg, emb, train, heldout, models, Models(base_model, load_model(text_dir)),
                         info)
