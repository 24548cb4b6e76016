"""Frozen-encoder embedding export.

Runs a pretrained transformer encoder over a text corpus and writes the pooled
last-hidden-state vectors as a feature file the cepc loaders accept: JSONL
({"id", "label", "features"}) or the CEPC binary format, chosen by the output
suffix (".bin" means binary, anything else means JSONL).

The encoder is used purely as a frozen feature extractor; no weights are
updated. Given the same model revision, pooling mode, and inputs, the exported
vectors are deterministic. JSONL floats are formatted with 6 significant
digits ("%.6g"), so re-exporting the same corpus yields a byte-identical file.

The hub cache directory can be pinned with the EMBED_EXPORT_CACHE environment
variable (the transformers-native HF_HOME also works).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from cepc.data import DomainDataset, save_binary

from .errors import ExportError, ModelLoadError
from .records import UNLABELED, TextRecord, read_text_records

CACHE_ENV = "EMBED_EXPORT_CACHE"
FLOAT_FMT = ".6g"


def load_encoder(model_id: str, *, revision: str | None = None, cache_dir: str | None = None):
    """Load tokenizer and encoder, mapping any hub or deserialization failure
    to ModelLoadError."""
    from transformers import AutoModel, AutoTokenizer

    cache = cache_dir or os.environ.get(CACHE_ENV) or None
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id, revision=revision, cache_dir=cache)
        model = AutoModel.from_pretrained(model_id, revision=revision, cache_dir=cache)
    except Exception as e:  # hub errors span OSError/ValueError/json, by design
        raise ModelLoadError(f"could not load encoder {model_id!r}: {e}") from e
    model.eval()
    return tokenizer, model


def _pool(hidden: torch.Tensor, mask: torch.Tensor, pooling: str) -> torch.Tensor:
    if pooling == "cls":
        return hidden[:, 0, :]
    if pooling == "mean":
        m = mask.unsqueeze(-1).to(hidden.dtype)
        return (hidden * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)
    raise ExportError(f"unknown pooling {pooling!r} (expected 'cls' or 'mean')")


def encode_texts(
    texts: list[str],
    tokenizer,
    model,
    *,
    pooling: str = "mean",
    batch: int = 32,
    max_len: int = 256,
) -> np.ndarray:
    """Pooled last-hidden-state vectors, float32 (n, hidden_size)."""
    if batch < 1 or max_len < 2:
        raise ExportError(f"batch must be >= 1 and max_len >= 2, got {batch}/{max_len}")
    chunks = []
    with torch.no_grad():
        for start in range(0, len(texts), batch):
            enc = tokenizer(
                texts[start : start + batch],
                padding=True,
                truncation=True,
                max_length=max_len,
                return_tensors="pt",
            )
            hidden = model(**enc).last_hidden_state
            vecs = _pool(hidden, enc["attention_mask"], pooling)
            chunks.append(vecs.to(torch.float32).cpu().numpy())
    feats = np.concatenate(chunks, axis=0)
    want = getattr(model.config, "hidden_size", None)
    if want is not None and feats.shape[1] != want:
        raise ExportError(f"pooled width {feats.shape[1]} != encoder hidden size {want}")
    if not np.isfinite(feats).all():
        raise ExportError("encoder produced non-finite embeddings")
    return feats


def write_features_jsonl(path: str | Path, records: list[TextRecord], feats: np.ndarray) -> None:
    # Lines are assembled by hand so the float format stays pinned to %.6g;
    # json.dumps would print full repr floats and break byte-stable re-export.
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec, row in zip(records, feats):
            label = "null" if rec.label == UNLABELED else str(rec.label)
            vals = ", ".join(format(float(v), FLOAT_FMT) for v in row)
            fh.write(f'{{"id": {json.dumps(rec.doc_id)}, "label": {label}, "features": [{vals}]}}\n')


def _as_dataset(name: str, records: list[TextRecord], feats: np.ndarray) -> DomainDataset:
    labels = np.array([r.label for r in records], dtype=np.int8)
    role = "target" if (labels == UNLABELED).all() else "source"
    return DomainDataset(
        name=name,
        role=role,
        ids=[r.doc_id for r in records],
        labels=labels,
        features=feats,
    )


def export_embeddings(
    in_jsonl: str | Path,
    model_id: str,
    pooling: str,
    out_path: str | Path,
    *,
    batch: int = 32,
    max_len: int = 256,
    revision: str | None = None,
    cache_dir: str | None = None,
) -> tuple[int, int]:
    """Embed a text corpus and write a feature file; returns (rows, dim)."""
    if pooling not in ("cls", "mean"):
        raise ExportError(f"unknown pooling {pooling!r} (expected 'cls' or 'mean')")
    records = read_text_records(in_jsonl)
    tokenizer, model = load_encoder(model_id, revision=revision, cache_dir=cache_dir)
    feats = encode_texts(
        [r.text for r in records], tokenizer, model,
        pooling=pooling, batch=batch, max_len=max_len,
    )
    out_path = Path(out_path)
    if out_path.suffix == ".bin":
        save_binary(_as_dataset(out_path.stem, records, feats), out_path)
    else:
        write_features_jsonl(out_path, records, feats)
    return feats.shape[0], feats.shape[1]
