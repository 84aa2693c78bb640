"""Tokenizers, token sequences and model vocabularies.

Tokenizers here are string-level: they map text to a list of token strings
and back. Integer ids only appear once a :class:`Vocab` is attached, which is
a model-side concern.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    text: str

    def __len__(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "text": self.text}


class Tokenizer:
    tokenizer_id = "base"

    def tokenize(self, text: str) -> list[str]:
        raise NotImplementedError

    def detokenize(self, tokens: Sequence[str]) -> str:
        raise NotImplementedError

    def encode(self, text: str, max_tokens: int | None = None) -> TokenSequence:
        toks = self.tokenize(text)
        if max_tokens is not None:
            toks = toks[:max_tokens]
        return TokenSequence(tuple(toks), self.detokenize(toks))

    def from_tokens(self, tokens: Iterable[str]) -> TokenSequence:
        toks = tuple(tokens)
        return TokenSequence(toks, self.detokenize(toks))

    def canonicalize(self, text: str) -> str:
        return self.detokenize(self.tokenize(text))


class WhitespaceTokenizer(Tokenizer):
    tokenizer_id = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


class WordPunctTokenizer(Tokenizer):
    """Splits runs of word characters from individual punctuation marks."""

    tokenizer_id = "wordpunct"
    _pattern = re.compile(r"\w+|[^\w\s]")

    def tokenize(self, text: str) -> list[str]:
        return self._pattern.findall(text)

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


class CharTokenizer(Tokenizer):
    tokenizer_id = "chars"

    def tokenize(self, text: str) -> list[str]:
        return list(text)

    def detokenize(self, tokens: Sequence[str]) -> str:
        return "".join(tokens)


_TOKENIZERS = {
    cls.tokenizer_id: cls
    for cls in (WhitespaceTokenizer, WordPunctTokenizer, CharTokenizer)
}


def get_tokenizer(tokenizer_id: str) -> Tokenizer:
    try:
        return _TOKENIZERS[tokenizer_id]()
    except KeyError:
        raise ConfigError(
            f"unknown tokenizer {tokenizer_id!r}; known: {sorted(_TOKENIZERS)}"
        ) from None


@dataclass
class Vocab:
    """Token string <-> id table. Ids 0..3 are always the special tokens."""

    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            self.tokens = list(SPECIAL_TOKENS) + [
                t for t in self.tokens if t not in SPECIAL_TOKENS
            ]
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.tokens[i])
        return out

    @property
    def content_tokens(self) -> list[str]:
        return self.tokens[len(SPECIAL_TOKENS):]

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]]) -> "Vocab":
        seen: dict[str, None] = {}
        for seq in sequences:
            for t in seq:
                seen.setdefault(t, None)
        return cls(list(SPECIAL_TOKENS) + sorted(seen))

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, s: str) -> "Vocab":
        return cls(json.loads(s))
