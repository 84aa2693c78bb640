"""Iterative correction, sequence-level beam search, and an exhaustive oracle.

Acceptance rule: a round never makes the best hypothesis worse. For width 1
a correction replaces the current hypothesis only if its cosine to the target
is strictly higher; for wider beams the previous members stay in the
candidate pool, so the best-of-beam cosine cannot drop.
"""
from __future__ import annotations

import itertools
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import embed_hypotheses
from .embedders import Embedder, cosine_rows
from .errors import ConfigError
from .models import InversionModel
from .tokens import TokenSequence, get_tokenizer

FIXED_TEXT_PRESETS = {
    "motorcycle": ("there's no reverse on a motorcycle, as my friend found out "
                   "quite dramatically the other day"),
    "the32": " ".join(["the"] * 32),
}
EXACT_TOL = 1e-6
BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass
class BeamConfig:
    width: int = 1
    max_rounds: int = 20
    feedback: bool = True
    initializer: str = "base"  # "base" | "random" | "fixed:<text or preset name>"
    seed: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.width}")
        if self.max_rounds < 0:
            raise ConfigError("max_rounds must be >= 0")
        if not (self.initializer in ("base", "random") or self.initializer.startswith("fixed:")):
            raise ConfigError(f"unknown initializer {self.initializer!r}")

    @property
    def fixed_text(self) -> str | None:
        if not self.initializer.startswith("fixed:"):
            return None
        text = self.initializer[len("fixed:"):]
        return FIXED_TEXT_PRESETS.get(text, text)


@dataclass
class Models:
    base: InversionModel | None
    corrector: InversionModel

    @property
    def tokenizer(self):
        return get_tokenizer(self.corrector.config.tokenizer_id)


@dataclass
class CorrectionStep:
    round: int
    hypothesis: TokenSequence
    hypothesis_embedding: np.ndarray
    cosine: float
    accepted: bool

    def to_dict(self) -> dict:
        return {"text": self.hypothesis.text, "cosine": self.cosine, "accepted": self.accepted}


@dataclass
class CorrectionTrace:
    target: np.ndarray
    rounds: list[list[CorrectionStep]] = field(default_factory=list)
    feedback_queries: list[int] = field(default_factory=list)
    scoring_queries: list[int] = field(default_factory=list)

    @property
    def final(self) -> CorrectionStep:
        return max(self.rounds[-1], key=lambda s: s.cosine)

    @property
    def total_queries(self) -> int:
        return sum(self.feedback_queries) + sum(self.scoring_queries)

    def best_cosines(self) -> list[float]:
        return [max(s.cosine for s in beam) for beam in self.rounds]

    def to_records(self) -> list[dict]:
        return [{"round": t, "beam": [s.to_dict() for s in beam],
                 "queries": {"feedback": self.feedback_queries[t],
                             "scoring": self.scoring_queries[t]}}
                for t, beam in enumerate(self.rounds)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())


def write_traces(traces: Sequence[CorrectionTrace], path) -> None:
    with open(path, "w") as fh:
        for i, tr in enumerate(traces):
            for rec in tr.to_records():
                fh.write(json.dumps({"job": i, **rec}) + "\n")


def _target_rng(target: np.ndarray, seed: int) -> np.random.Generator:
    digest = zlib.crc32(np.ascontiguousarray(target, dtype=np.float64).tobytes())
    return np.random.default_rng([seed, digest])


def initial_hypotheses(models: Models, targets: np.ndarray, config: BeamConfig
                       ) -> list[TokenSequence]:
    """Round-0 hypothesis per target. Every search starts from one hypothesis;
    a wider beam fills up from the first correction round on."""
    tok = models.tokenizer
    if config.initializer == "base":
        if models.base is None:
            raise ConfigError("initializer 'base' needs a base model")
        base = models.base
        e = base.as_tensor(targets)
        hyp = torch.zeros((len(targets), 0), dtype=torch.long, device=base.device)
        return [tok.from_tokens(o) for o in base.greedy(e, base.empty_hat(len(targets)), hyp)]
    if config.initializer == "random":
        vocab = models.corrector.vocab.content_tokens
        max_len = models.corrector.config.max_tokens
        out = []
        for t in targets:
            rng = _target_rng(t, config.seed)
            n = int(rng.integers(1, max_len + 1))
            out.append(tok.from_tokens(vocab[i] for i in rng.integers(len(vocab), size=n)))
        return out
    seq = tok.encode(config.fixed_text, models.corrector.config.max_tokens)
    return [seq for _ in targets]


def parse_decode(decode: str) -> tuple[str, float | int | None]:
    """``"greedy"``, ``"beam:<k>"`` or ``"nucleus:<p>"``."""
    kind, _, arg = decode.partition(":")
    try:
        if kind == "greedy" and not arg:
            return kind, None
        if kind == "beam":
            k = int(arg)
            if k < 1:
                raise ValueError
            return kind, k
        if kind == "nucleus":
            p = float(arg or 0.9)
            if not 0 < p <= 1:
                raise ValueError
            return kind, p
    except ValueError:
        pass
    raise ConfigError(f"bad decode spec {decode!r}; use greedy, beam:<k> (k >= 1) "
                      "or nucleus:<p> (0 < p <= 1)")


def base_generate(model: InversionModel, e, decode: str = "greedy", num_return: int = 1,
                  rerank_embedder: Embedder | None = None, seed: int = 0
                  ) -> list[list[TokenSequence]]:
    """Candidates from the base model alone, optionally re-sorted by cosine to ``e``."""
    kind, arg = parse_decode(decode)
    if num_return < 1:
        raise ConfigError("num_return must be >= 1")
    targets = np.atleast_2d(np.asarray(e, dtype=np.float64))
    tok = get_tokenizer(model.config.tokenizer_id)
    et = model.as_tensor(targets)
    hyp = torch.zeros((len(targets), 0), dtype=torch.long, device=model.device)
    e_hat = model.empty_hat(len(targets))
    if kind == "greedy":
        if num_return != 1:
            raise ConfigError("greedy decoding returns exactly one candidate")
        outs = [[o] for o in model.greedy(et, e_hat, hyp)]
    elif kind == "beam":
        if num_return > arg:
            raise ConfigError(f"num_return {num_return} exceeds beam width {arg}")
        outs = model.beam(et, e_hat, hyp, arg, num_return)
    else:
        gen = torch.Generator(device=model.device).manual_seed(seed)
        outs = model.nucleus(et, e_hat, hyp, arg, num_return, generator=gen)
    cands = [[tok.from_tokens(o) for o in row] for row in outs]
    if rerank_embedder is None:
        return cands
    ranked = []
    for t, row in zip(targets, cands):
        cos = cosine_rows(t, embed_hypotheses([c.text for c in row], rerank_embedder))
        order = np.argsort(-cos, kind="stable")
        ranked.append([row[i] for i in order])
    return ranked


def _uses_feedback(models: Models, config: BeamConfig) -> bool:
    """A corrector trained text-only never sees phi(x_t), so it is never queried for it."""
    return config.feedback and models.corrector.config.feedback


def _corrector_e_hat(models: Models, embedder: Embedder, hyps: Sequence[TokenSequence],
                     feedback: bool) -> tuple[torch.Tensor | None, int]:
    if not feedback:
        return None, 0
    vecs = embed_hypotheses([h.text for h in hyps], embedder)
    return models.corrector.as_tensor(vecs), len(hyps)


def correct_once(models: Models, e, hypothesis: TokenSequence, embedder: Embedder,
                 feedback: bool = True) -> TokenSequence:
    """One greedy correction of ``hypothesis`` toward target ``e``."""
    corr = models.corrector
    e_hat, _ = _corrector_e_hat(models, embedder, [hypothesis], feedback)
    out = corr.greedy(corr.as_tensor(e)[None], e_hat, corr.hypothesis_ids([hypothesis]))
    return models.tokenizer.from_tokens(out[0])


def invert_iterative(models: Models, embedder: Embedder, e, config: BeamConfig
                     ) -> CorrectionTrace:
    """Greedy multi-round correction of a single hypothesis."""
    if config.width != 1:
        raise ConfigError("invert_iterative runs with width 1; use invert_sbeam")
    e = np.asarray(e, dtype=np.float64)
    trace = CorrectionTrace(target=e)
    x = initial_hypotheses(models, e[None], config)[0]
    emb = embed_hypotheses([x.text], embedder)[0]
    cos = float(cosine_rows(e, emb[None])[0])
    scored = {x.text: (emb, cos)}  # texts are embedded at most once per job
    trace.rounds.append([CorrectionStep(0, x, emb, cos, True)])
    trace.feedback_queries.append(0)
    trace.scoring_queries.append(1)
    feedback = _uses_feedback(models, config)
    for t in range(1, config.max_rounds + 1):
        if cos >= 1 - EXACT_TOL:
            break
        proposal = correct_once(models, e, x, embedder, feedback)
        n_score = 0
        if proposal.text not in scored:
            p_emb = embed_hypotheses([proposal.text], embedder)[0]
            scored[proposal.text] = (p_emb, float(cosine_rows(e, p_emb[None])[0]))
            n_score = 1
        p_emb, p_cos = scored[proposal.text]
        accepted = proposal.text != x.text and p_cos > cos
        if accepted:
            x, emb, cos = proposal, p_emb, p_cos
        trace.rounds.append([CorrectionStep(t, x, emb, cos, accepted)])
        trace.feedback_queries.append(1 if feedback else 0)
        trace.scoring_queries.append(n_score)
    return trace


@dataclass
class _Member:
    seq: TokenSequence
    emb: np.ndarray
    cos: float


def _rank(pool: list[tuple[_Member, bool]], width: int) -> list[tuple[_Member, bool]]:
    # stable: earlier pool entries (previous members first) win cosine ties
    return sorted(pool, key=lambda p: -p[0].cos)[:width]


def invert_sbeam_batch(models: Models, embedder: Embedder, targets, config: BeamConfig,
                       chunk_size: int = 64) -> list[CorrectionTrace]:
    """Sequence-level beam search for many targets at once."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    traces: list[CorrectionTrace] = []
    for i in range(0, len(targets), chunk_size):
        traces.extend(_sbeam_chunk(models, embedder, targets[i:i + chunk_size], config))
    return traces


def _score_new(pools: list[list[tuple[TokenSequence, bool]]], targets: np.ndarray,
               known: list[dict[str, _Member]], embedder: Embedder) -> list[int]:
    """Embed each pool's not-yet-scored texts in one call; returns per-target counts."""
    todo: list[tuple[int, TokenSequence]] = []
    for j, pool in enumerate(pools):
        seen = set(known[j])
        for seq, _ in pool:
            if seq.text not in seen:
                seen.add(seq.text)
                todo.append((j, seq))
    counts = [0] * len(pools)
    if todo:
        vecs = embed_hypotheses([s.text for _, s in todo], embedder)
        for (j, seq), v in zip(todo, vecs):
            known[j][seq.text] = _Member(seq, v, float(cosine_rows(targets[j], v[None])[0]))
            counts[j] += 1
    return counts


def _sbeam_chunk(models: Models, embedder: Embedder, targets: np.ndarray,
                 config: BeamConfig) -> list[CorrectionTrace]:
    b = config.width
    n = len(targets)
    traces = [CorrectionTrace(target=t) for t in targets]
    init = initial_hypotheses(models, targets, config)
    known: list[dict[str, _Member]] = [{} for _ in range(n)]
    counts = _score_new([[(s, True)] for s in init], targets, known, embedder)
    beams: list[list[_Member]] = []
    for j in range(n):
        beams.append([known[j][init[j].text]])
        traces[j].rounds.append([CorrectionStep(0, m.seq, m.emb, m.cos, True) for m in beams[j]])
        traces[j].feedback_queries.append(0)
        traces[j].scoring_queries.append(counts[j])
    active = [beams[j][0].cos < 1 - EXACT_TOL for j in range(n)]
    corr = models.corrector
    feedback = _uses_feedback(models, config)
    for t in range(1, config.max_rounds + 1):
        idx = [j for j in range(n) if active[j]]
        if not idx:
            break
        flat = [(j, m) for j in idx for m in beams[j]]
        hyps = [m.seq for _, m in flat]
        if feedback:
            e_hat = corr.as_tensor(embed_hypotheses([h.text for h in hyps], embedder))
        else:
            e_hat = None
        e = corr.as_tensor(np.stack([targets[j] for j, _ in flat]))
        outs = corr.beam(e, e_hat, corr.hypothesis_ids(hyps), b)
        new: dict[int, list[TokenSequence]] = {j: [] for j in idx}
        fb = {j: 0 for j in idx}
        for (j, _), row in zip(flat, outs):
            new[j].extend(models.tokenizer.from_tokens(o) for o in row)
            fb[j] += 1 if feedback else 0
        pools = []
        for j in idx:
            pool = [(m.seq, False) for m in beams[j]]
            pool += [(s, True) for s in new[j]]
            pools.append(pool)
        counts = _score_new(pools, targets[idx], [known[j] for j in idx], embedder)
        for k, j in enumerate(idx):
            seen: set[str] = set()
            cand = []
            for seq, is_new in pools[k]:
                if seq.text in seen:
                    continue
                seen.add(seq.text)
                cand.append((known[j][seq.text], is_new))
            ranked = _rank(cand, b)
            beams[j] = [m for m, _ in ranked]
            traces[j].rounds.append(
                [CorrectionStep(t, m.seq, m.emb, m.cos, is_new) for m, is_new in ranked])
            traces[j].feedback_queries.append(fb[j])
            traces[j].scoring_queries.append(counts[k])
            active[j] = beams[j][0].cos < 1 - EXACT_TOL
    return traces


def invert_sbeam(models: Models, embedder: Embedder, e, config: BeamConfig) -> CorrectionTrace:
    return invert_sbeam_batch(models, embedder, np.asarray(e)[None], config)[0]


def brute_force_invert(embedder: Embedder, vocabulary: Sequence[str], max_len: int, e,
                       batch_size: int = 4096) -> TokenSequence:
    """Exact argmax of cosine over every sequence of 1..max_len vocabulary tokens.

    Ties (within 1e-12) go to the shortest sequence, then the lexicographically
    smallest token tuple.
    """
    vocabulary = list(vocabulary)
    V = len(vocabulary)
    total = sum(V ** k for k in range(1, max_len + 1))
    if total > BRUTE_FORCE_LIMIT:
        raise ConfigError(f"search space of {total} sequences exceeds {BRUTE_FORCE_LIMIT}")
    tok = get_tokenizer(embedder.descriptor.tokenizer_id)
    e = np.asarray(e, dtype=np.float64)
    best_cos, best = -np.inf, None
    cands = (c for k in range(1, max_len + 1) for c in itertools.product(vocabulary, repeat=k))
    while True:
        chunk = list(itertools.islice(cands, batch_size))
        if not chunk:
            break
        cos = cosine_rows(e, embedder.embed([tok.detokenize(c) for c in chunk]))
        for c, v in zip(chunk, cos):
            if v > best_cos + 1e-12:
                best_cos, best = v, c
            elif v >= best_cos - 1e-12 and (len(c), c) < (len(best), best):
                best_cos, best = max(best_cos, v), c
    return tok.from_tokens(best)


def analyze_hypothesis_closeness(records: Sequence, bins: int = 20, out_dir=None) -> dict:
    """Histogram of cos(e, phi(x0)) over a hypothesis dataset."""
    if not records:
        raise ConfigError("need at least one hypothesis record")
    cos = np.array([r.cosine for r in records])
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    summary = {"bin_edges": edges.tolist(), "counts": counts.tolist(),
               "mean": float(cos.mean()), "n": int(len(cos))}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "hypothesis_closeness.json").write_text(json.dumps(summary, indent=2))
        from .plots import histogram_plot
        histogram_plot(edges, counts, out / "hypothesis_closeness.png",
                       xlabel="cos(e, phi(x0))", title=f"mean {summary['mean']:.3f}")
    return summary
