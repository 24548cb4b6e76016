"""Frozen transformer embeddings for cepc feature files."""

from .errors import ExportError, ModelLoadError, RecordError
from .exporter import encode_texts, export_embeddings, load_encoder, write_features_jsonl
from .records import TextRecord, read_text_records

__all__ = [
    "ExportError",
    "ModelLoadError",
    "RecordError",
    "TextRecord",
    "encode_texts",
    "export_embeddings",
    "load_encoder",
    "read_text_records",
    "write_features_jsonl",
]
