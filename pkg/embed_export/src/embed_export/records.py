"""Raw text corpus format.

One JSON object per line: {"id": str, "label": 0|1|null, "text": str}.
A missing label is read as null (unlabeled). Ids must be unique, text must be
non-empty, and the corpus must be uniformly labeled or uniformly unlabeled so
the exported feature file passes downstream validation unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import RecordError

UNLABELED = -1


@dataclass(frozen=True)
class TextRecord:
    doc_id: str
    label: int  # 0, 1, or UNLABELED
    text: str


def read_text_records(path: str | Path) -> list[TextRecord]:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise RecordError(f"cannot read {path}: {e}") from e

    records: list[TextRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise RecordError(f"{path}: line {lineno}: malformed JSON ({e})") from e
        if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
            raise RecordError(f"{path}: line {lineno}: need id and text keys")
        doc_id, text, label = obj["id"], obj["text"], obj.get("label")
        if not isinstance(doc_id, str) or not doc_id:
            raise RecordError(f"{path}: line {lineno}: id must be a non-empty string")
        if doc_id in seen:
            raise RecordError(f"{path}: duplicate document id {doc_id!r}", doc_id=doc_id)
        seen.add(doc_id)
        if label not in (0, 1, None):
            raise RecordError(
                f"{path}: record {doc_id!r}: label must be 0, 1 or null", doc_id=doc_id
            )
        if not isinstance(text, str) or not text.strip():
            raise RecordError(f"{path}: record {doc_id!r}: empty text", doc_id=doc_id)
        records.append(
            TextRecord(doc_id=doc_id, label=UNLABELED if label is None else int(label), text=text)
        )

    if not records:
        raise RecordError(f"{path}: no records")
    labeled = [r for r in records if r.label != UNLABELED]
    if labeled and len(labeled) != len(records):
        first = next(r.doc_id for r in records if r.label == UNLABELED)
        raise RecordError(
            f"{path}: mixed labeled and unlabeled records (first unlabeled: {first!r})",
            doc_id=first,
        )
    return records
