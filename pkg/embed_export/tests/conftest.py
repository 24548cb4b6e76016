import json
import os

import pytest

# Tests must never touch the network; the encoder fixture is a local directory.
os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "a", "cat", "dog", "bird", "sat", "ran", "flew",
    "on", "over", "mat", "fence", "roof", "fast", "slow",
    "##s", "##ing", "blue", "red", "green",
]

HIDDEN = 32


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> str:
    """A BERT-style encoder with random weights, saved to disk like a hub
    snapshot so from_pretrained exercises the real loading path."""
    import torch
    from transformers import BertConfig, BertModel, BertTokenizer

    d = tmp_path_factory.mktemp("tiny-bert")
    BertTokenizer(vocab={t: i for i, t in enumerate(VOCAB)}).save_pretrained(d)

    torch.manual_seed(7)
    cfg = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=HIDDEN,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    BertModel(cfg).save_pretrained(d)
    return str(d)


def write_corpus(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


@pytest.fixture()
def corpus3(tmp_path):
    path = tmp_path / "texts.jsonl"
    write_corpus(path, [
        {"id": "d0", "label": 0, "text": "the cat sat on the mat"},
        {"id": "d1", "label": 1, "text": "a dog ran over the fence"},
        {"id": "d2", "label": 1, "text": "the bird flew over the roof"},
    ])
    return path
