"""A small add-k smoothed word n-gram model.

Serves two roles offline: the validation LM that ranks synthetic candidates
by next-token entropy, and the reference model for per-token NLL.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from typing import Iterable

UNK = "<unk>"
BOS = "<s>"

_WORD = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def word_tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class NgramLM:
    def __init__(self, order: int = 2, k: float = 1.0, vocab: Iterable[str] | None = None):
        if order < 1:
            raise ValueError("order must be >= 1")
        if k < 0:
            raise ValueError("k must be >= 0")
        self.order = order
        self.k = k
        self.vocab: list[str] = list(dict.fromkeys(vocab)) if vocab is not None else []
        if UNK not in self.vocab:
            self.vocab.append(UNK)
        self._index = set(self.vocab)
        self.counts: dict[tuple[str, ...], Counter] = defaultdict(Counter)
        self.totals: Counter = Counter()

    @classmethod
    def uniform(cls, vocab_size: int) -> "NgramLM":
        """A unigram model with no data: every token has probability 1/vocab_size."""
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        return cls(order=1, k=1.0, vocab=[UNK] + [f"<w{i}>" for i in range(vocab_size - 1)])

    @classmethod
    def trained(cls, texts: Iterable[str], order: int = 2, k: float = 1.0) -> "NgramLM":
        texts = list(texts)
        vocab = sorted({t for text in texts for t in word_tokens(text)})
        lm = cls(order=order, k=k, vocab=vocab)
        lm.fit(texts)
        return lm

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _norm(self, token: str) -> str:
        return token if token in self._index else UNK

    def _context(self, history: list[str]) -> tuple[str, ...]:
        if self.order == 1:
            return ()
        padded = [BOS] * (self.order - 1) + history
        return tuple(padded[-(self.order - 1):])

    def fit(self, texts: Iterable[str]) -> "NgramLM":
        for text in texts:
            tokens = [self._norm(t) for t in word_tokens(text)]
            for i, tok in enumerate(tokens):
                ctx = self._context(tokens[:i])
                self.counts[ctx][tok] += 1
                self.totals[ctx] += 1
        return self

    def prob(self, token: str, history: list[str]) -> float:
        key = self._context([self._norm(t) for t in history])
        ctx = self.counts.get(key)
        seen = ctx[self._norm(token)] if ctx else 0
        total = self.totals[key]
        denom = total + self.k * self.vocab_size
        if denom == 0:
            return 0.0
        return (seen + self.k) / denom

    def next_token_probabilities(self, prefix: str) -> dict[str, float]:
        history = [self._norm(t) for t in word_tokens(prefix)]
        key = self._context(history)
        ctx = self.counts.get(key) or Counter()
        total = self.totals[key]
        denom = total + self.k * self.vocab_size
        if denom == 0:
            return {w: 1.0 / self.vocab_size for w in self.vocab}
        return {w: (ctx[w] + self.k) / denom for w in self.vocab}

    def token_nlls(self, text: str) -> list[float]:
        tokens = word_tokens(text)
        out = []
        for i, tok in enumerate(tokens):
            p = self.prob(tok, tokens[:i])
            out.append(math.inf if p <= 0.0 else -math.log(p))
        return out
