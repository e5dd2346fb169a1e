"""Naive trace-based membership attacks.

All scores here are oriented so that higher means more member-like. Each
attack's own statistic (a count, an NLL, an edit distance, a rating) is kept
unflipped in ``raw_projection``.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np

from .attack import MembershipScore
from .embedding import Encoder
from .errors import InsufficientTraces, ScorerError, UnparseableJudgement
from .lm import NgramLM, word_tokens
from .providers import Provider, ReasoningTrace

THINKING_TOKEN = "thinking_token"
COMPRESSION_RATE = "compression_rate"
TR_CONSISTENCY_CHAR = "tr_consistency_char"
TR_CONSISTENCY_TOKEN = "tr_consistency_token"
LLM_JUDGEMENT = "llm_judgement"


def _data_lines(name: str) -> list[str]:
    text = resources.files("tracemia.data").joinpath(name).read_text(encoding="utf-8")
    return parse_phrase_file(text)


def parse_phrase_file(text: str) -> list[str]:
    """One phrase per line; blank lines and ``#`` comments are ignored."""
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def default_stopwords() -> frozenset[str]:
    return frozenset(w.lower() for w in _data_lines("stopwords.txt"))


# thinking tokens

@dataclass(frozen=True)
class ThinkingTokenSeedSet:
    seeds: tuple[str, ...]
    similarity_threshold: float = 0.8

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed set is empty")
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in (0, 1]")
        object.__setattr__(self, "seeds", tuple(s.lower() for s in self.seeds))

    @classmethod
    def default(cls, similarity_threshold: float = 0.8) -> "ThinkingTokenSeedSet":
        return cls(tuple(_data_lines("thinking_seeds.txt")), similarity_threshold)

    @classmethod
    def from_file(cls, path, similarity_threshold: float = 0.8) -> "ThinkingTokenSeedSet":
        with open(path, encoding="utf-8") as f:
            return cls(tuple(parse_phrase_file(f.read())), similarity_threshold)


def candidate_phrases(text: str, stopwords: Iterable[str], max_n: int = 3) -> list[str]:
    """Words and sliding n-grams (n <= max_n) of ``text`` after stopword removal."""
    stop = set(stopwords)
    words = [w for w in word_tokens(text) if re.match(r"[a-z0-9]", w) and w not in stop]
    out = []
    for n in range(1, max_n + 1):
        for i in range(len(words) - n + 1):
            out.append(" ".join(words[i:i + n]))
    return out


def thinking_token_count(
    trace_text: str,
    seeds: ThinkingTokenSeedSet,
    encoder: Encoder,
    stopwords: Iterable[str] | None = None,
) -> int:
    stop = set(default_stopwords() if stopwords is None else stopwords)
    # a seed word must survive stopword removal or it could never be counted
    stop -= {w for s in seeds.seeds for w in word_tokens(s)}
    candidates = candidate_phrases(trace_text, stop)
    if not candidates:
        return 0
    unique = list(dict.fromkeys(candidates))
    cand = np.asarray(encoder.embed_many(unique))
    seed = np.asarray(encoder.embed_many(list(seeds.seeds)))
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    seed /= np.linalg.norm(seed, axis=1, keepdims=True)
    best = (cand @ seed.T).max(axis=1)
    # tolerate rounding for exact matches when the threshold is 1.0
    hit = dict(zip(unique, best >= seeds.similarity_threshold - 1e-12))
    return sum(1 for c in candidates if hit[c])


def thinking_token_score(trace: ReasoningTrace, seeds: ThinkingTokenSeedSet, encoder: Encoder,
                         stopwords: Iterable[str] | None = None) -> MembershipScore:
    count = thinking_token_count(trace.trace_text, seeds, encoder, stopwords)
    return MembershipScore(trace.sequence_id, -float(count), THINKING_TOKEN, float(count))


# compression rate

class ReferenceScorer(Protocol):
    scorer_id: str

    def token_nlls(self, text: str) -> list[float]: ...


class BuiltinReferenceScorer:
    def __init__(self, lm: NgramLM, scorer_id: str = "builtin-ngram"):
        self.lm = lm
        self.scorer_id = scorer_id

    def token_nlls(self, text: str) -> list[float]:
        return self.lm.token_nlls(text)


class RemoteReferenceScorer:
    """POST ``{"text": ...}`` and read ``{"token_nll": [...]}``."""

    def __init__(self, endpoint: str, scorer_id: str = "remote", client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.scorer_id = scorer_id
        self.client = client or httpx.Client(timeout=120.0)

    def token_nlls(self, text: str) -> list[float]:
        try:
            resp = self.client.post(self.endpoint, json={"text": text})
            resp.raise_for_status()
            return [float(x) for x in resp.json()["token_nll"]]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as e:
            raise ScorerError(f"reference scorer request failed: {e}") from None


def mean_token_nll(text: str, scorer: ReferenceScorer) -> float:
    nlls = scorer.token_nlls(text)
    if not nlls:
        raise ScorerError("trace has no tokens under the reference scorer")
    if not all(math.isfinite(x) for x in nlls):
        raise ScorerError("reference scorer returned a non-finite NLL")
    return math.fsum(nlls) / len(nlls)


def compression_rate_score(trace: ReasoningTrace, scorer: ReferenceScorer) -> MembershipScore:
    nll = mean_token_nll(trace.trace_text, scorer)
    return MembershipScore(trace.sequence_id, -nll, COMPRESSION_RATE, nll)


# trace consistency

def _units(text: str, granularity: str) -> list[str]:
    if granularity == "character":
        return list(text)
    if granularity == "token":
        return re.findall(r"\w+|[^\w\s]", text)
    raise ValueError(f"unknown granularity {granularity!r}")


def _levenshtein_ids(a: np.ndarray, b: np.ndarray) -> int:
    if len(a) < len(b):
        a, b = b, a
    m = len(b)
    if m == 0:
        return len(a)
    cols = np.arange(m + 1)
    prev = cols.copy()
    for i, ca in enumerate(a, start=1):
        cur = np.empty(m + 1, dtype=np.int64)
        cur[0] = i
        np.minimum(prev[:-1] + (b != ca), prev[1:] + 1, out=cur[1:])
        # insertions: cur[j] = min_k<=j cur[k] + (j - k)
        cur = np.minimum.accumulate(cur - cols) + cols
        prev = cur
    return int(prev[-1])


def _encode_pair(a: Sequence[str], b: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    vocab: dict[str, int] = {}
    ia = np.fromiter((vocab.setdefault(x, len(vocab)) for x in a), dtype=np.int64, count=len(a))
    ib = np.fromiter((vocab.setdefault(x, len(vocab)) for x in b), dtype=np.int64, count=len(b))
    return ia, ib


def edit_distance(a: str, b: str, granularity: str = "character") -> int:
    """Unit-cost Levenshtein distance over characters or word/punctuation tokens."""
    ua, ub = _units(a, granularity), _units(b, granularity)
    return _levenshtein_ids(*_encode_pair(ua, ub))


def normalized_edit_distance(a: str, b: str, granularity: str = "character") -> float:
    ua, ub = _units(a, granularity), _units(b, granularity)
    longest = max(len(ua), len(ub))
    if longest == 0:
        return 0.0
    return _levenshtein_ids(*_encode_pair(ua, ub)) / longest


def trace_consistency(texts: Sequence[str], granularity: str = "character") -> float:
    if len(texts) < 2:
        raise InsufficientTraces(f"need at least 2 traces, got {len(texts)}")
    pairs = list(itertools.combinations(texts, 2))
    return math.fsum(normalized_edit_distance(a, b, granularity) for a, b in pairs) / len(pairs)


def trace_consistency_score(traces: Sequence[ReasoningTrace], granularity: str = "character") -> MembershipScore:
    if len(traces) < 2:
        raise InsufficientTraces(f"need at least 2 traces, got {len(traces)}")
    ids = {t.sequence_id for t in traces}
    if len(ids) != 1:
        raise ValueError(f"traces belong to different sequences: {sorted(ids)}")
    value = trace_consistency([t.trace_text for t in traces], granularity)
    attack = TR_CONSISTENCY_CHAR if granularity == "character" else TR_CONSISTENCY_TOKEN
    return MembershipScore(traces[0].sequence_id, -value, attack, value, len(traces))


# LLM judgement

DEFAULT_JUDGE_TEMPLATE = resources.files("tracemia.data").joinpath("judge_template.txt").read_text(encoding="utf-8")
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


def parse_judgement(reply: str) -> float:
    m = _NUMBER.search(reply)
    if m is None:
        raise UnparseableJudgement(f"no number in judge reply {reply[:80]!r}")
    return float(m.group())


def llm_judgement_score(trace: ReasoningTrace, judge: Provider,
                        template: str = DEFAULT_JUDGE_TEMPLATE) -> MembershipScore:
    if template.count("{trace}") != 1:
        raise ValueError("judge template must contain exactly one {trace} placeholder")
    prompt = template.replace("{trace}", trace.trace_text)
    reply, _, _ = judge.complete([{"role": "user", "content": prompt}])
    rating = parse_judgement(reply)
    return MembershipScore(trace.sequence_id, rating, LLM_JUDGEMENT, rating)
