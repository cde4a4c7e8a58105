from pathlib import Path
from typing import List

import pytest
import torch

from core.bpe import BpeVocab, bytes_to_unicode, train_vocab
from core.config import ModelConfig
from core.encoder.model import RobertaEncoder
from core.synthetic import corpus_documents
from core.types import Document


def make_vocab(size: int) -> BpeVocab:
    "Vocabulary of exactly `size` entries built from distinct two-byte merges"
    table = bytes_to_unicode()
    merges = []
    for a in range(256):
        for b in range(256):
            if len(merges) == size - 261:
                return BpeVocab(merges)
            merges.append((table[a], table[b]))
    raise ValueError(f"Cannot build a vocabulary of {size} entries")


@pytest.fixture(scope="session")
def toy_documents() -> List[Document]:
    return [Document(id=f"doc-{i}", text=text.encode("utf-8")) for i, text in enumerate(corpus_documents(200, 8, 1))]


@pytest.fixture(scope="session")
def toy_vocab(toy_documents) -> BpeVocab:
    return train_vocab(toy_documents, 320)


@pytest.fixture
def toy_config(toy_vocab) -> ModelConfig:
    return ModelConfig(
        num_layers=2,
        hidden_size=16,
        num_heads=2,
        ffn_size=32,
        vocab_size=len(toy_vocab),
        max_positions=64,
        dropout=0.0,
        attention_dropout=0.0,
    )


@pytest.fixture
def toy_model(toy_config) -> RobertaEncoder:
    torch.manual_seed(0)
    return RobertaEncoder(toy_config).eval()


@pytest.fixture
def tokenizer_dir(tmp_path: Path, toy_vocab) -> Path:
    directory = tmp_path / "tokenizer"
    toy_vocab.save(directory)
    return directory
