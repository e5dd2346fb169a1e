"""Projection-based membership scoring along the recall-inference axis."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .anchors import RecallInferenceAxis
from .dataset import MEMBER, NON_MEMBER, Dataset, QuerySequence, atomic_write_text, dumps_jsonl
from .embedding import Encoder, encode_denoised
from .errors import DegenerateAxis, DimensionMismatch, EncoderAxisMismatch
from .providers import PromptTemplate, Provider, ReasoningTrace, map_concurrent, render_prompt

log = logging.getLogger(__name__)

BLACKSPECTRUM = "blackspectrum"


@dataclass(frozen=True)
class MembershipScore:
    sequence_id: str
    score: float
    attack_id: str
    raw_projection: float
    n_samples: int = 1
    label: str | None = None

    def to_json(self) -> dict:
        record = {
            "sequence_id": self.sequence_id,
            "attack_id": self.attack_id,
            "score": self.score,
            "raw_projection": self.raw_projection,
            "n_samples": self.n_samples,
        }
        if self.label is not None:
            record["label"] = self.label
        return record


@dataclass
class AttackOutcome:
    scores: list[MembershipScore]
    decisions: dict[str, str] | None = None
    threshold: float | None = None
    skipped: dict[str, str] = field(default_factory=dict)

    def with_threshold(self, threshold: float) -> "AttackOutcome":
        decisions = {s.sequence_id: decide(s, threshold) for s in self.scores}
        return AttackOutcome(self.scores, decisions, threshold, dict(self.skipped))


def project_onto_axis(trace_vec: np.ndarray, axis: RecallInferenceAxis) -> float:
    trace_vec = np.asarray(trace_vec, dtype=float)
    if trace_vec.shape != axis.direction.shape:
        raise DimensionMismatch(f"{trace_vec.shape} vs axis {axis.direction.shape}")
    return float((trace_vec - axis.anchor_recall) @ axis.direction)


def membership_score(trace_vec: np.ndarray, axis: RecallInferenceAxis,
                     sequence_id: str = "") -> MembershipScore:
    """Map the recall anchor to 1 and the inference anchor to 0 (unclamped)."""
    if not axis.distance > 0:
        raise DegenerateAxis("axis has zero length")
    rho = project_onto_axis(trace_vec, axis)
    return MembershipScore(sequence_id, 1.0 - rho / axis.distance, BLACKSPECTRUM, rho)


def decide(score: MembershipScore | float, threshold: float) -> str:
    value = score.score if isinstance(score, MembershipScore) else score
    return MEMBER if value >= threshold else NON_MEMBER


def score_trace_vectors(vectors: Sequence[np.ndarray], axis: RecallInferenceAxis,
                        sequence_id: str, label: str | None = None) -> MembershipScore:
    """Average the per-trace scores of one sequence."""
    per = [membership_score(v, axis, sequence_id) for v in vectors]
    return MembershipScore(
        sequence_id,
        float(np.mean([p.score for p in per])),
        BLACKSPECTRUM,
        float(np.mean([p.raw_projection for p in per])),
        len(per),
        label,
    )


TraceTransform = Callable[[ReasoningTrace], ReasoningTrace]


def collect_traces(
    sequences: Iterable[QuerySequence],
    provider: Provider,
    template: PromptTemplate,
    k: int,
    transform: TraceTransform | None = None,
) -> tuple[dict[str, list[ReasoningTrace]], dict[str, str]]:
    """Fetch ``k`` traces per sequence; failures go to the skip map, not the results."""
    sequences = list(sequences)

    def one(seq: QuerySequence) -> list[ReasoningTrace]:
        traces = provider.fetch_traces_repeated(render_prompt(template, seq), k, seq.id)
        if transform is not None:
            traces = [transform(t) for t in traces]
        return traces

    results = map_concurrent(one, sequences, provider.config.max_in_flight)
    traces, skipped = {}, {}
    for seq, res in zip(sequences, results):
        if isinstance(res, BaseException):
            skipped[seq.id] = f"{type(res).__name__}: {res}"
            log.warning("skipping %s: %s", seq.id, skipped[seq.id])
        else:
            traces[seq.id] = res
    return traces, skipped


def score_traces(
    sequences: Iterable[QuerySequence],
    traces: dict[str, list[ReasoningTrace]],
    encoder: Encoder,
    axis: RecallInferenceAxis,
    samples_per_sequence: int | None = None,
) -> list[MembershipScore]:
    if axis.encoder_id and axis.encoder_id != encoder.encoder_id:
        raise EncoderAxisMismatch(f"axis built with {axis.encoder_id!r}, encoder is {encoder.encoder_id!r}")
    out = []
    for seq in sequences:
        if seq.id not in traces:
            continue
        chosen = traces[seq.id][:samples_per_sequence] if samples_per_sequence else traces[seq.id]
        vectors = encode_denoised(encoder, [t.trace_text for t in chosen], seq.text)
        out.append(score_trace_vectors(vectors, axis, seq.id, seq.label))
    return sorted(out, key=lambda s: s.sequence_id)


def score_dataset(
    dataset: Dataset,
    provider: Provider,
    encoder: Encoder,
    axis: RecallInferenceAxis,
    template: PromptTemplate,
    samples_per_sequence: int = 1,
    transform: TraceTransform | None = None,
) -> AttackOutcome:
    if axis.encoder_id and axis.encoder_id != encoder.encoder_id:
        raise EncoderAxisMismatch(f"axis built with {axis.encoder_id!r}, encoder is {encoder.encoder_id!r}")
    traces, skipped = collect_traces(dataset.sequences, provider, template, samples_per_sequence, transform)
    scores = score_traces(dataset.sequences, traces, encoder, axis)
    return AttackOutcome(scores, skipped=skipped)


def write_scores(scores: Iterable[MembershipScore], path: str | os.PathLike) -> None:
    ordered = sorted(scores, key=lambda s: s.sequence_id)
    atomic_write_text(path, dumps_jsonl(s.to_json() for s in ordered))


def read_scores(path: str | os.PathLike) -> list[MembershipScore]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                o = json.loads(line)
                out.append(MembershipScore(o["sequence_id"], float(o["score"]), o["attack_id"],
                                           float(o["raw_projection"]), int(o.get("n_samples", 1)),
                                           o.get("label")))
    return out
