"""Tagged documents and per-dimension corpus assembly.

Documents carry a (language, domain, task) tag triple. A dimension
corpus fixes one or more axes and keeps every document matching the
fixed values; the free axes are expected to vary, and a warning is
logged when they do not.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .bundle import Vocab
from .errors import ValidationError

log = logging.getLogger("cusprune")

AXES = ("language", "domain", "task")
AXIS_ALIASES = {"lang": "language", "language": "language", "domain": "domain", "task": "task"}

DEFAULT_CORPUS_SIZE = 50  # documents per dimension; more are accepted


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    language: str
    domain: str
    task: str

    def __post_init__(self):
        if not self.text:
            raise ValidationError(f"document {self.id!r}: empty text")
        for axis in AXES:
            if not getattr(self, axis):
                raise ValidationError(f"document {self.id!r}: missing {axis} tag")

    def axis(self, name: str) -> str:
        return getattr(self, name)


@dataclass(frozen=True)
class DimensionCorpus:
    fixed: tuple[tuple[str, str], ...]  # ((axis, value), ...) sorted by axis
    documents: tuple[Document, ...]

    def __post_init__(self):
        if not self.documents:
            raise ValidationError("dimension corpus must contain at least one document")
        for axis, value in self.fixed:
            for doc in self.documents:
                if doc.axis(axis) != value:
                    raise ValidationError(f"document {doc.id!r} does not match {axis}={value}")

    @property
    def label(self) -> str:
        axes = "-".join(a for a, _ in self.fixed)
        values = "-".join(v for _, v in self.fixed)
        return f"{axes}:{values}"

    def __len__(self) -> int:
        return len(self.documents)


def load_documents(path) -> list[Document]:
    """Parse a newline-delimited JSON document file; order preserved."""
    docs: list[Document] = []
    seen: set[str] = set()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        missing = {"id", "text", "language", "domain", "task"} - set(obj)
        if missing:
            raise ValidationError(f"{path}:{lineno}: missing key(s) {sorted(missing)}")
        try:
            doc = Document(
                id=str(obj["id"]),
                text=str(obj["text"]),
                language=str(obj["language"]),
                domain=str(obj["domain"]),
                task=str(obj["task"]),
            )
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        if doc.id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {doc.id!r}")
        seen.add(doc.id)
        docs.append(doc)
    return docs


def build_dimension_corpus(docs, fixed: dict[str, str]) -> DimensionCorpus:
    """Select documents matching every fixed axis value.

    Warns when a free axis shows fewer than 2 distinct values: the
    construction wants variety along unconstrained axes.
    """
    if not fixed:
        raise ValidationError("at least one axis must be fixed")
    normalized: dict[str, str] = {}
    for axis, value in fixed.items():
        canon = AXIS_ALIASES.get(axis)
        if canon is None:
            raise ValidationError(f"unknown axis {axis!r} (expected language/domain/task)")
        normalized[canon] = value
    selected = tuple(d for d in docs if all(d.axis(a) == v for a, v in normalized.items()))
    if not selected:
        raise ValidationError(f"no documents match {normalized}")
    for axis in AXES:
        if axis in normalized:
            continue
        distinct = {d.axis(axis) for d in selected}
        if len(distinct) < 2:
            log.warning(
                "corpus %s: free axis %r has only %s; expected variety",
                normalized,
                axis,
                sorted(distinct),
            )
    key = tuple(sorted(normalized.items()))
    return DimensionCorpus(fixed=key, documents=selected)


@lru_cache(maxsize=4)
def _token_index(vocab: Vocab) -> tuple[dict[bytes, int], int]:
    table: dict[bytes, int] = {}
    max_len = 1
    for tid, tok in enumerate(vocab.tokens):
        if tok and tok not in table:  # duplicates resolve to the lowest id
            table[tok] = tid
            max_len = max(max_len, len(tok))
    return table, max_len


def tokenize(vocab: Vocab, text: str) -> list[int]:
    """Greedy longest-match tokenization with single-byte fallback.

    Bytes with no vocab entry map to id 0, so tokenization is total.
    """
    data = text.encode("utf-8")
    by_prefix, max_len = _token_index(vocab)
    ids: list[int] = []
    pos = 0
    while pos < len(data):
        for length in range(min(max_len, len(data) - pos), 0, -1):
            tid = by_prefix.get(data[pos : pos + length])
            if tid is not None:
                ids.append(tid)
                pos += length
                break
        else:
            ids.append(0)  # reserved fallback slot
            pos += 1
    return ids


def detokenize(vocab: Vocab, ids) -> str:
    return b"".join(vocab.tokens[i] for i in ids).decode("utf-8", errors="replace")
