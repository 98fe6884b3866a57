"""Shared fixtures: a tiny locally built encoder and a passage sample.

Also collects acceptance-criterion verdict lines for the terminal summary.
"""

import json
import random

import pytest
import torch
import transformers
from transformers import BertConfig, BertModel, BertTokenizer

transformers.utils.logging.set_verbosity_error()
transformers.utils.logging.disable_progress_bar()

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "of", "and", "a", "tide", "harbor", "signal", "council", "vote",
    "ember", "glass", "river", "stone", "light", "keeper", "market",
    "festival", "ledger", "archive", "garden",
    "quo", "pol", "bea", "rit",
    "##rum", "##icy", "##con", "##ual", "##s",
    ".", ",", ";",
]

WORD_POOL = [
    "the", "of", "and", "a", "tide", "harbor", "signal", "council", "vote",
    "ember", "glass", "river", "stone", "light", "keeper", "market",
    "festival", "ledger", "archive", "garden",
    "quorum", "policy", "beacon", "rituals", "zyxwv",
]


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    """A tiny randomly initialized encoder saved to disk, no network needed."""
    d = tmp_path_factory.mktemp("tiny-encoder")
    tokenizer = BertTokenizer(vocab={w: i for i, w in enumerate(VOCAB)}, do_lower_case=True)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=128,
    )
    torch.manual_seed(0)
    model = BertModel(config)
    model.save_pretrained(d)
    tokenizer.save_pretrained(d)
    return str(d)


def write_passages(path, n, seed=1234):
    rng = random.Random(seed)
    ids = []
    with open(path, "w", encoding="utf-8") as f:
        for i in range(n):
            words = rng.choices(WORD_POOL, k=rng.randint(8, 20))
            if rng.random() < 0.5:
                words.insert(rng.randrange(1, len(words)), ",")
            pid = f"p{i:04d}"
            ids.append(pid)
            f.write(json.dumps({"id": pid, "text": " ".join(words) + " ."}) + "\n")
    return ids


@pytest.fixture(scope="session")
def sample(tmp_path_factory):
    """100-passage JSONL sample plus its id order."""
    path = tmp_path_factory.mktemp("sample") / "passages.jsonl"
    ids = write_passages(path, 100)
    return str(path), ids
