"""Encoder-decoder inverters conditioned on embeddings.

Both the base inverter ``p(x0 | e)`` and the corrector ``p(x_{t+1} | e, x_t, e_t)``
are :class:`InversionModel` instances. The encoder input is::

    concat(EmbToSeq_1(e), EmbToSeq_2(e_hat), EmbToSeq_3(e - e_hat), w_1 .. w_n)

which has length ``3s + n``. For the base model the hypothesis is empty and
``e_hat`` is the embedding of the empty-text stand-in.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError
from .tokens import TokenSequence, Vocab, get_tokenizer

ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh}


@dataclass
class InverterConfig:
    vocab: list[str]
    embed_dim: int
    tokenizer_id: str = "whitespace"
    d_enc: int = 128
    s: int = 16
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    dropout: float = 0.0
    max_tokens: int = 32
    activation: str = "gelu"
    feedback: bool = True
    role: str = "corrector"
    embedder: dict = field(default_factory=dict)
    # phi(empty stand-in), fixed at training time; the base model's e_hat
    empty_embedding: list[float] | None = None

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError("projection length s must be >= 1")
        if self.d_enc % self.n_heads:
            raise ConfigError("d_enc must be divisible by n_heads")
        if self.role not in ("base", "corrector"):
            raise ConfigError(f"role must be 'base' or 'corrector', got {self.role!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        get_tokenizer(self.tokenizer_id)

    def to_dict(self) -> dict:
        return asdict(self)


class EmbToSeq(nn.Module):
    """``W2 sigma(W1 e)`` reshaped to ``(s, d_enc)``."""

    def __init__(self, d: int, s: int, d_enc: int, activation: str = "gelu"):
        super().__init__()
        self.d, self.s, self.d_enc = d, s, d_enc
        self.w1 = nn.Linear(d, d, bias=False)
        self.w2 = nn.Linear(d, s * d_enc, bias=False)
        self.act = ACTIVATIONS[activation]()

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.d:
            raise ContractError(f"expected embedding of dim {self.d}, got {e.shape[-1]}")
        out = self.w2(self.act(self.w1(e)))
        return out.reshape(*e.shape[:-1], self.s, self.d_enc)


def emb_to_seq(e, head: EmbToSeq) -> torch.Tensor:
    return head(torch.as_tensor(e, dtype=head.w1.weight.dtype))


class InversionModel(nn.Module):
    def __init__(self, config: InverterConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocab(list(config.vocab))
        c = config
        self.tok_emb = nn.Embedding(len(self.vocab), c.d_enc, padding_idx=Vocab.pad_id)
        self.enc_pos = nn.Embedding(3 * c.s + c.max_tokens, c.d_enc)
        self.dec_pos = nn.Embedding(c.max_tokens + 2, c.d_enc)
        self.heads = nn.ModuleList(
            [EmbToSeq(c.embed_dim, c.s, c.d_enc, c.activation) for _ in range(3)])
        with warnings.catch_warnings():
            # pre-norm layers cannot use the nested-tensor fast path; torch warns about it
            warnings.filterwarnings("ignore", message="enable_nested_tensor")
            self.transformer = nn.Transformer(
                d_model=c.d_enc, nhead=c.n_heads, num_encoder_layers=c.enc_layers,
                num_decoder_layers=c.dec_layers, dim_feedforward=c.ffn_dim,
                dropout=c.dropout, batch_first=True, norm_first=True)
        self.out_norm = nn.LayerNorm(c.d_enc)
        self._scale = math.sqrt(c.d_enc)
        nn.init.normal_(self.tok_emb.weight, std=c.d_enc ** -0.5)

    @property
    def device(self) -> torch.device:
        return self.tok_emb.weight.device

    # -- tensor plumbing ---------------------------------------------------

    def hypothesis_ids(self, hyps: Sequence[TokenSequence | Sequence[str]]) -> torch.Tensor:
        """Pad hypotheses to a ``(B, n)`` id tensor (``n`` may be 0)."""
        rows = [self.vocab.encode(list(getattr(h, "tokens", h))[: self.config.max_tokens])
                for h in hyps]
        n = max((len(r) for r in rows), default=0)
        out = torch.full((len(rows), n), Vocab.pad_id, dtype=torch.long)
        for i, r in enumerate(rows):
            out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        return out.to(self.device)

    def target_ids(self, targets: Sequence[TokenSequence | Sequence[str]]) -> torch.Tensor:
        """``(B, L)`` ids laid out as ``<bos> x_1 .. x_n <eos> <pad>...``."""
        rows = [[Vocab.bos_id]
                + self.vocab.encode(list(getattr(t, "tokens", t))[: self.config.max_tokens])
                + [Vocab.eos_id] for t in targets]
        L = max(len(r) for r in rows)
        out = torch.full((len(rows), L), Vocab.pad_id, dtype=torch.long)
        for i, r in enumerate(rows):
            out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        return out.to(self.device)

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=torch.float32, device=self.device)

    def empty_hat(self, batch: int) -> torch.Tensor:
        if self.config.empty_embedding is None:
            raise ConfigError("model config carries no empty-input embedding")
        return self.as_tensor(self.config.empty_embedding)[None].expand(batch, -1)

    # -- model -------------------------------------------------------------

    def assemble_input(self, e: torch.Tensor, e_hat: torch.Tensor | None,
                       hyp_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encoder input of shape ``(B, 3s + n, d_enc)`` and its padding mask.

        ``e_hat=None`` (or a config with ``feedback=False``) zeroes both the
        ``e_hat`` and ``e - e_hat`` segments.
        """
        if e_hat is None:
            e_hat = torch.zeros_like(e)
            feedback = False
        else:
            feedback = self.config.feedback
        if e.shape != e_hat.shape:
            raise ContractError(f"e and e_hat differ in shape: {tuple(e.shape)} vs {tuple(e_hat.shape)}")
        if e.shape[-1] != self.config.embed_dim:
            raise ContractError(
                f"expected embeddings of dim {self.config.embed_dim}, got {e.shape[-1]}")
        if not feedback:
            # text-only variant: no information from phi(x_t) reaches the encoder
            e_hat = torch.zeros_like(e)
            diff = torch.zeros_like(e)
        else:
            diff = e - e_hat
        segs = [self.heads[0](e), self.heads[1](e_hat), self.heads[2](diff),
                self.tok_emb(hyp_ids) * self._scale]
        x = torch.cat(segs, dim=1)
        B, n = hyp_ids.shape
        s3 = 3 * self.config.s
        x = x + self.enc_pos(torch.arange(s3 + n, device=x.device))
        mask = torch.cat([torch.zeros(B, s3, dtype=torch.bool, device=x.device),
                          hyp_ids == Vocab.pad_id], dim=1)
        return x, mask

    def encode(self, e, e_hat, hyp_ids):
        x, mask = self.assemble_input(e, e_hat, hyp_ids)
        memory = self.transformer.encoder(x, src_key_padding_mask=mask)
        return memory, mask

    def decode(self, memory, mem_mask, tgt_in: torch.Tensor) -> torch.Tensor:
        L = tgt_in.shape[1]
        y = self.tok_emb(tgt_in) * self._scale + self.dec_pos(torch.arange(L, device=tgt_in.device))
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool, device=y.device), diagonal=1)
        h = self.transformer.decoder(y, memory, tgt_mask=causal,
                                     tgt_key_padding_mask=tgt_in == Vocab.pad_id,
                                     memory_key_padding_mask=mem_mask)
        return self.out_norm(h) @ self.tok_emb.weight.T

    def forward(self, e, e_hat, hyp_ids, tgt_in) -> torch.Tensor:
        memory, mask = self.encode(e, e_hat, hyp_ids)
        return self.decode(memory, mask, tgt_in)

    def loss(self, e, e_hat, hyp_ids, tgt_ids) -> torch.Tensor:
        logits = self.forward(e, e_hat, hyp_ids, tgt_ids[:, :-1])
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                               tgt_ids[:, 1:].reshape(-1), ignore_index=Vocab.pad_id)

    # -- decoding ----------------------------------------------------------

    def _next_logprobs(self, memory, mem_mask, seqs) -> torch.Tensor:
        logits = self.decode(memory, mem_mask, seqs)[:, -1]
        logits[:, Vocab.pad_id] = float("-inf")
        logits[:, Vocab.bos_id] = float("-inf")
        return F.log_softmax(logits, dim=-1)

    @torch.no_grad()
    def greedy(self, e, e_hat, hyp_ids) -> list[list[str]]:
        memory, mem_mask = self.encode(e, e_hat, hyp_ids)
        B = memory.shape[0]
        seqs = torch.full((B, 1), Vocab.bos_id, dtype=torch.long, device=self.device)
        done = torch.zeros(B, dtype=torch.bool, device=self.device)
        for _ in range(self.config.max_tokens + 1):
            nxt = self._next_logprobs(memory, mem_mask, seqs).argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, Vocab.eos_id), nxt)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            done |= nxt == Vocab.eos_id
            if done.all():
                break
        return [self.vocab.decode(row[1:].tolist()) for row in seqs]

    @torch.no_grad()
    def beam(self, e, e_hat, hyp_ids, width: int, num_return: int | None = None
             ) -> list[list[list[str]]]:
        """Token-level beam search; per input, up to ``num_return`` sequences best-first."""
        if width < 1:
            raise ConfigError(f"beam width must be >= 1, got {width}")
        num_return = width if num_return is None else num_return
        if not 1 <= num_return <= width:
            raise ConfigError("num_return must be in [1, width]")
        if width == 1:
            return [[s] for s in self.greedy(e, e_hat, hyp_ids)]
        memory, mem_mask = self.encode(e, e_hat, hyp_ids)
        B, k = memory.shape[0], width
        memory = memory.repeat_interleave(k, dim=0)
        mem_mask = mem_mask.repeat_interleave(k, dim=0)
        seqs = torch.full((B * k, 1), Vocab.bos_id, dtype=torch.long, device=self.device)
        scores = torch.full((B, k), float("-inf"), device=self.device)
        scores[:, 0] = 0.0
        done = torch.zeros(B * k, dtype=torch.bool, device=self.device)
        for _ in range(self.config.max_tokens + 1):
            lp = self._next_logprobs(memory, mem_mask, seqs)  # (B*k, V)
            V = lp.shape[-1]
            # finished beams may only extend with <eos> at no cost
            eos_only = torch.full_like(lp, float("-inf"))
            eos_only[:, Vocab.eos_id] = 0.0
            lp = torch.where(done[:, None], eos_only, lp)
            cand = (scores.reshape(-1, 1) + lp).reshape(B, k * V)
            top, idx = cand.topk(k, dim=-1)
            src = idx // V + torch.arange(B, device=self.device)[:, None] * k
            tok = idx % V
            seqs = torch.cat([seqs[src.reshape(-1)], tok.reshape(-1, 1)], dim=1)
            done = done[src.reshape(-1)] | (tok.reshape(-1) == Vocab.eos_id)
            scores = top
            if done.all():
                break
        out = []
        for b in range(B):
            rows = []
            for j in range(k):
                if torch.isfinite(scores[b, j]):
                    rows.append(self.vocab.decode(seqs[b * k + j, 1:].tolist()))
            out.append(rows[:num_return])
        return out

    @torch.no_grad()
    def nucleus(self, e, e_hat, hyp_ids, top_p: float, num_return: int,
                generator: torch.Generator | None = None) -> list[list[list[str]]]:
        if not 0 < top_p <= 1:
            raise ConfigError(f"top_p must be in (0, 1], got {top_p}")
        memory, mem_mask = self.encode(e, e_hat, hyp_ids)
        B = memory.shape[0]
        memory = memory.repeat_interleave(num_return, dim=0)
        mem_mask = mem_mask.repeat_interleave(num_return, dim=0)
        seqs = torch.full((B * num_return, 1), Vocab.bos_id, dtype=torch.long, device=self.device)
        done = torch.zeros(B * num_return, dtype=torch.bool, device=self.device)
        for _ in range(self.config.max_tokens + 1):
            probs = self._next_logprobs(memory, mem_mask, seqs).exp()
            sp, si = probs.sort(dim=-1, descending=True)
            keep = sp.cumsum(-1) - sp < top_p
            sp = torch.where(keep, sp, torch.zeros_like(sp))
            pick = torch.multinomial(sp / sp.sum(-1, keepdim=True), 1, generator=generator)
            nxt = si.gather(-1, pick).squeeze(-1)
            nxt = torch.where(done, torch.full_like(nxt, Vocab.eos_id), nxt)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            done |= nxt == Vocab.eos_id
            if done.all():
                break
        flat = [self.vocab.decode(r[1:].tolist()) for r in seqs]
        return [flat[i * num_return:(i + 1) * num_return] for i in range(B)]


def assemble_corrector_input(model: InversionModel, e, e_hat, hypothesis) -> torch.Tensor:
    """Single-example encoder input, shape ``(3s + n, d_enc)``."""
    hyp = model.hypothesis_ids([hypothesis])
    e_hat = None if e_hat is None else model.as_tensor(e_hat)[None]
    x, _ = model.assemble_input(model.as_tensor(e)[None], e_hat, hyp)
    return x[0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
