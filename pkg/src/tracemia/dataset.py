"""Query-sequence datasets: segmentation, JSONL persistence and validation."""

from __future__ import annotations

import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

from .errors import DuplicateId, EmptyDocument, ParseError

MEMBER = "member"
NON_MEMBER = "non_member"
LABELS = (MEMBER, NON_MEMBER)
DEFAULT_LENGTHS = (32, 64, 128)


class Tokenizer(Protocol):
    tokenizer_id: str

    def tokenize(self, text: str) -> list[str]: ...

    def detokenize(self, tokens: list[str]) -> str: ...


class WhitespaceTokenizer:
    tokenizer_id = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: list[str]) -> str:
        return " ".join(tokens)


@dataclass(frozen=True)
class QuerySequence:
    id: str
    text: str
    token_length: int
    document_id: str
    label: str | None = None
    source: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"sequence {self.id!r} has empty text")
        if self.token_length < 1:
            raise ValueError(f"sequence {self.id!r} has token_length < 1")
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"sequence {self.id!r} has unknown label {self.label!r}")

    def to_json(self) -> dict:
        record = {
            "id": self.id,
            "text": self.text,
            "token_length": self.token_length,
            "document_id": self.document_id,
        }
        if self.label is not None:
            record["label"] = self.label
        if self.source is not None:
            record["source"] = self.source
        return record


@dataclass
class Dataset:
    sequences: list[QuerySequence] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for seq in self.sequences:
            if seq.id in seen:
                raise DuplicateId(self.sequences.index(seq) + 1, seq.id)
            seen.add(seq.id)
        counts = Counter(s.label for s in self.sequences if s.label is not None)
        if counts:
            self.metadata["n_member"] = str(counts.get(MEMBER, 0))
            self.metadata["n_non_member"] = str(counts.get(NON_MEMBER, 0))

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def by_id(self) -> dict[str, QuerySequence]:
        return {s.id: s for s in self.sequences}


def segment_text(
    document: str,
    document_id: str,
    lengths: Iterable[int] = DEFAULT_LENGTHS,
    tokenizer: Tokenizer | None = None,
) -> list[QuerySequence]:
    """Cut a document into consecutive, non-overlapping segments.

    One pass is made per requested length. Every emitted segment has exactly
    that many tokens; a trailing remainder shorter than the length is dropped.
    Ids have the form ``<document_id>:<length>:<index>``.
    """
    tokenizer = tokenizer or WhitespaceTokenizer()
    lengths = sorted(set(lengths))
    if any(n < 1 for n in lengths):
        raise ValueError("segment lengths must be >= 1")
    tokens = tokenizer.tokenize(document)
    if not tokens:
        raise EmptyDocument(f"document {document_id!r} has no tokens")

    out = []
    for n in lengths:
        for i in range(len(tokens) // n):
            chunk = tokens[i * n:(i + 1) * n]
            out.append(QuerySequence(
                id=f"{document_id}:{n}:{i}",
                text=tokenizer.detokenize(chunk),
                token_length=n,
                document_id=document_id,
            ))
    return out


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def load_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    sequences: list[QuerySequence] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            try:
                seq = QuerySequence(
                    id=_require(obj, "id", str, lineno),
                    text=_require(obj, "text", str, lineno),
                    token_length=_require(obj, "token_length", int, lineno),
                    document_id=_require(obj, "document_id", str, lineno),
                    label=obj.get("label"),
                    source=obj.get("source"),
                )
            except ValueError as e:
                raise ParseError(lineno, str(e)) from None
            if seq.id in seen:
                raise DuplicateId(lineno, seq.id)
            seen.add(seq.id)
            sequences.append(seq)

    metadata = {}
    meta = _meta_path(path)
    if meta.exists():
        metadata = json.loads(meta.read_text(encoding="utf-8"))
    return Dataset(sequences, metadata)


def _require(obj: dict, key: str, typ: type, lineno: int):
    if key not in obj:
        raise ParseError(lineno, f"missing key {key!r}")
    value = obj[key]
    # bool is an int subclass; reject it explicitly
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise ParseError(lineno, f"key {key!r} must be {typ.__name__}")
    return value


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    atomic_write_text(path, dumps_jsonl(s.to_json() for s in dataset.sequences))
    meta = _meta_path(path)
    if dataset.metadata:
        atomic_write_text(meta, json.dumps(dataset.metadata, sort_keys=True, indent=2) + "\n")
    elif meta.exists():
        meta.unlink()


@dataclass
class ValidationReport:
    n_sequences: int
    duplicate_ids: list[str]
    empty_text_ids: list[str]
    label_counts: dict[str, int]
    imbalance_ratio: float | None
    per_length_counts: dict[int, int]
    notes: list[str]

    @property
    def ok(self) -> bool:
        return not self.duplicate_ids and not self.empty_text_ids


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Summarize dataset health without raising.

    ``imbalance_ratio`` is the minority label count over the majority label
    count (1.0 when balanced), or None when no labels are present.
    """
    ids = Counter(s.id for s in dataset.sequences)
    duplicates = sorted(i for i, c in ids.items() if c > 1)
    empty = [s.id for s in dataset.sequences if not s.text.strip()]
    labels = Counter(s.label for s in dataset.sequences if s.label is not None)
    label_counts = {lab: labels.get(lab, 0) for lab in LABELS}
    notes = []
    if not labels:
        ratio = None
        notes.append("no labels present")
    else:
        lo, hi = sorted(label_counts.values())
        ratio = lo / hi if hi else None
        if lo == 0:
            notes.append("only one label class present")
        unlabeled = len(dataset.sequences) - sum(labels.values())
        if unlabeled:
            notes.append(f"{unlabeled} sequences are unlabeled")
    per_length = dict(sorted(Counter(s.token_length for s in dataset.sequences).items()))
    return ValidationReport(
        n_sequences=len(dataset.sequences),
        duplicate_ids=duplicates,
        empty_text_ids=empty,
        label_counts=label_counts,
        imbalance_ratio=ratio,
        per_length_counts=per_length,
        notes=notes,
    )
