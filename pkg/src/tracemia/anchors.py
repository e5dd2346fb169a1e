"""Anchor sets, entropy-based synthetic selection and the recall-inference axis."""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .dataset import QuerySequence, atomic_write_text, dumps_jsonl
from .errors import (
    DegenerateAxis,
    DimensionMismatch,
    EmptyInput,
    GammaTooLarge,
    InvalidDistribution,
    ScorerError,
)
from .lm import NgramLM

VERBATIM_RECALL = "verbatim_recall"
LOW_INFORMATION_SYNTHETIC = "low_information_synthetic"
ANCHOR_KINDS = (VERBATIM_RECALL, LOW_INFORMATION_SYNTHETIC)


@dataclass(frozen=True)
class AnchorSequenceSet:
    kind: str
    sequences: tuple[QuerySequence, ...]

    def __post_init__(self):
        if self.kind not in ANCHOR_KINDS:
            raise ValueError(f"unknown anchor kind {self.kind!r}")
        if not self.sequences:
            raise ValueError("an anchor set needs at least one sequence")
        object.__setattr__(self, "sequences", tuple(self.sequences))

    @property
    def size(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class NextTokenDistribution:
    probabilities: dict[str, float]
    vocab_size: int

    def __post_init__(self):
        probs = list(self.probabilities.values())
        if not probs:
            raise InvalidDistribution("empty distribution")
        if any(not math.isfinite(p) or p < 0 for p in probs):
            raise InvalidDistribution("probabilities must be finite and non-negative")
        if abs(math.fsum(probs) - 1.0) > 1e-6:
            raise InvalidDistribution(f"probabilities sum to {math.fsum(probs)!r}, not 1")
        if self.vocab_size < len(probs):
            raise InvalidDistribution("vocab_size smaller than the number of tokens")

    @classmethod
    def renormalized(cls, tokens: Sequence[str], probabilities: Sequence[float],
                     vocab_size: int | None = None) -> "NextTokenDistribution":
        """Build from a (possibly truncated top-k) list of token probabilities."""
        total = math.fsum(probabilities)
        if total <= 0:
            raise InvalidDistribution("probabilities sum to zero")
        merged: dict[str, float] = {}
        for t, p in zip(tokens, probabilities):
            merged[t] = merged.get(t, 0.0) + p / total
        return cls(merged, vocab_size or len(merged))


def next_token_entropy(distribution: NextTokenDistribution) -> float:
    """Shannon entropy in nats; zero-probability tokens contribute nothing."""
    return -math.fsum(p * math.log(p) for p in distribution.probabilities.values() if p > 0)


def select_top_gamma(
    candidates: Sequence[tuple[QuerySequence, NextTokenDistribution]],
    gamma: int,
) -> AnchorSequenceSet:
    """Keep the ``gamma`` highest-entropy candidates.

    Ties are broken in favour of the lexicographically smaller id. Survivors
    are returned in their input order.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if gamma > len(candidates):
        raise GammaTooLarge(f"gamma={gamma} exceeds {len(candidates)} candidates")
    ranked = sorted(range(len(candidates)),
                    key=lambda i: (-next_token_entropy(candidates[i][1]), candidates[i][0].id))
    keep = set(ranked[:gamma])
    chosen = [candidates[i][0] for i in range(len(candidates)) if i in keep]
    return AnchorSequenceSet(LOW_INFORMATION_SYNTHETIC, tuple(chosen))


def build_anchor(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise EmptyInput("cannot build an anchor from no vectors")
    dims = {np.shape(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent vector shapes: {sorted(dims)}")
    return np.mean(np.asarray(vectors, dtype=float), axis=0)


@dataclass
class RecallInferenceAxis:
    anchor_recall: np.ndarray
    anchor_inference: np.ndarray
    direction: np.ndarray
    distance: float
    encoder_id: str = ""
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(self.direction.shape[0])

    def to_json(self) -> dict:
        return {
            "encoder_id": self.encoder_id,
            "dim": self.dim,
            "anchor_recall": self.anchor_recall.tolist(),
            "anchor_inference": self.anchor_inference.tolist(),
            "direction": self.direction.tolist(),
            "distance": self.distance,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RecallInferenceAxis":
        axis = cls(
            anchor_recall=np.asarray(obj["anchor_recall"], dtype=float),
            anchor_inference=np.asarray(obj["anchor_inference"], dtype=float),
            direction=np.asarray(obj["direction"], dtype=float),
            distance=float(obj["distance"]),
            encoder_id=obj.get("encoder_id", ""),
            provenance=obj.get("provenance", {}),
        )
        if axis.dim != obj.get("dim", axis.dim):
            raise ValueError("axis file dim does not match its vectors")
        return axis


def build_axis(anchor_recall: np.ndarray, anchor_inference: np.ndarray,
               min_distance: float = 1e-9, encoder_id: str = "",
               provenance: dict | None = None) -> RecallInferenceAxis:
    anchor_recall = np.asarray(anchor_recall, dtype=float)
    anchor_inference = np.asarray(anchor_inference, dtype=float)
    if anchor_recall.shape != anchor_inference.shape:
        raise DimensionMismatch(f"{anchor_recall.shape} vs {anchor_inference.shape}")
    u = anchor_inference - anchor_recall
    distance = float(np.linalg.norm(u))
    if distance < min_distance:
        raise DegenerateAxis(f"anchors are {distance:.3g} apart (minimum {min_distance:g})")
    return RecallInferenceAxis(anchor_recall, anchor_inference, u / distance, distance,
                               encoder_id, dict(provenance or {}))


def save_axis(axis: RecallInferenceAxis, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(axis.to_json(), indent=2, sort_keys=True) + "\n")


def load_axis(path: str | os.PathLike) -> RecallInferenceAxis:
    with open(path, encoding="utf-8") as f:
        return RecallInferenceAxis.from_json(json.load(f))


# anchor-set files: JSONL of {id, text, kind}

def save_anchor_set(anchor_set: AnchorSequenceSet, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_jsonl(
        {"id": s.id, "text": s.text, "kind": anchor_set.kind} for s in anchor_set.sequences))


def load_anchor_sequences(path: str | os.PathLike, kind: str | None = None) -> AnchorSequenceSet:
    """Read an anchor-set JSONL file, or a plain text file with one sequence per line.

    Plain text files need ``kind``; ids are then ``<stem>-<line number>``.
    """
    path = Path(path)
    seqs = []
    kinds = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("{"):
                obj = json.loads(line)
                kinds.add(obj.get("kind", kind))
                text, seq_id = obj["text"], obj["id"]
            else:
                kinds.add(kind)
                text, seq_id = line, f"{path.stem}-{lineno}"
            seqs.append(QuerySequence(seq_id, text, max(1, len(text.split())), f"anchor:{path.stem}"))
    kinds.discard(None)
    if len(kinds) > 1:
        raise ValueError(f"{path} mixes anchor kinds {sorted(kinds)}")
    resolved = kind or (kinds.pop() if kinds else None)
    if resolved is None:
        raise ValueError(f"cannot tell the anchor kind of {path}")
    return AnchorSequenceSet(resolved, tuple(seqs))


# validation-LM scoring of synthetic candidates

class NgramValidationLM:
    """Full-vocabulary next-token distributions from the built-in n-gram model."""

    def __init__(self, lm: NgramLM):
        self.lm = lm
        self.top_k: int | None = None

    def __call__(self, prefix: str) -> NextTokenDistribution:
        probs = self.lm.next_token_probabilities(prefix)
        return NextTokenDistribution(probs, self.lm.vocab_size)


class RemoteValidationLM:
    """POST ``{"prefix", "top_k"}`` and read ``{"tokens", "probabilities"}``.

    The returned top-k probabilities are renormalized, so the entropy is an
    approximation of the full-vocabulary value; ``top_k`` is recorded in the
    axis provenance for that reason.
    """

    def __init__(self, endpoint: str, top_k: int = 100, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.top_k = top_k
        self.client = client or httpx.Client(timeout=60.0)

    def __call__(self, prefix: str) -> NextTokenDistribution:
        try:
            resp = self.client.post(self.endpoint, json={"prefix": prefix, "top_k": self.top_k})
            resp.raise_for_status()
            obj = resp.json()
            return NextTokenDistribution.renormalized(obj["tokens"], obj["probabilities"])
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as e:
            raise ScorerError(f"validation LM request failed: {e}") from None


def score_candidates(
    candidates: Sequence[QuerySequence],
    validation_lm: Callable[[str], NextTokenDistribution],
) -> list[tuple[QuerySequence, NextTokenDistribution]]:
    return [(c, validation_lm(c.text)) for c in candidates]


GENERATION_PROMPT = (
    "Write {n} short, generic sentence openings in the style of a proverb. Each "
    "opening should give as little information as possible about how it continues, "
    "for example 'As is often said'. Put one opening per line with no numbering."
)

_LIST_PREFIX = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_candidate_lines(reply: str) -> list[str]:
    lines = []
    for raw in reply.splitlines():
        line = _LIST_PREFIX.sub("", raw).strip().strip('"').strip()
        if line:
            lines.append(line)
    return list(dict.fromkeys(lines))


def generate_candidates(provider, n: int = 100, prompt: str = GENERATION_PROMPT) -> list[QuerySequence]:
    """Ask a generator model for candidate low-information openings.

    ``provider`` must be configured to read the reply text (for example
    ``choices.0.message.content``).
    """
    text, _, _ = provider.complete([{"role": "user", "content": prompt.format(n=n)}])
    lines = parse_candidate_lines(text)
    return [QuerySequence(f"synthetic-{i:04d}", t, max(1, len(t.split())), "anchor:synthetic")
            for i, t in enumerate(lines)]
