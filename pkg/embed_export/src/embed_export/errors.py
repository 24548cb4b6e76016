"""Error taxonomy for the export tool.

Two failure classes matter to callers: bad input records (the corpus file is
wrong, exit code 2 in the CLI) and environment problems (the encoder could not
be downloaded or loaded, exit code 1).
"""


class ExportError(Exception):
    """Base class for every error raised by this package."""


class RecordError(ExportError):
    """An input record violated the corpus contract.

    Carries the offending document id when the problem is tied to one record;
    ``doc_id`` is None for file-level problems (unreadable file, mixed
    labeled/unlabeled corpus).
    """

    def __init__(self, message: str, doc_id: str | None = None):
        super().__init__(message)
        self.doc_id = doc_id


class ModelLoadError(ExportError):
    """The encoder could not be downloaded or loaded from the hub or disk."""
