"""Shared fixtures for the resident test suites."""

import pytest

from resident.data_pipeline import Dataset, Example, LabelVocab, write_tsv
from resident.resnet_model import ModelConfig, build_model

# One block over 16 bytes keeps forward/backward passes in the millisecond range
TINY_ARCH = {"n_blocks": 1, "d_b": 4, "conv_filters": 4, "gru_hidden": 3, "max_len": 16}
TINY_FLAGS = [
    "--n-blocks",
    "1",
    "--d-b",
    "4",
    "--conv-filters",
    "4",
    "--gru-hidden",
    "3",
    "--max-len",
    "16",
]


def toy_examples(per_label: int = 12):
    """Two labels whose sentences differ in the second byte of their accented letter."""
    examples = []
    for i in range(per_label):
        examples.append(Example.from_text("ä" * (2 + i % 4) + " kala " + "a" * (i % 3), "aa-x"))
        examples.append(Example.from_text("æ" * (2 + i % 4) + " kala " + "a" * (i % 3), "aa-y"))
    return examples


@pytest.fixture
def tiny_config():
    """Two-class one-block configuration."""
    return ModelConfig(n_classes=2, **TINY_ARCH)


@pytest.fixture
def tiny_labels():
    return LabelVocab(["aa-x", "aa-y"])


@pytest.fixture
def tiny_model(tiny_config, tiny_labels):
    return build_model(tiny_config, tiny_labels, seed=3)


@pytest.fixture
def toy_dataset():
    return Dataset.from_examples(toy_examples())


@pytest.fixture
def toy_tsv(tmp_path, toy_dataset):
    """The toy dataset written as a TSV file."""
    path = tmp_path / "toy.tsv"
    write_tsv(toy_dataset, path)
    return path
