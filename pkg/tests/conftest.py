"""Shared fixtures: a miniature synthetic corpus and models small enough for
finite-difference checks."""

from __future__ import annotations

import numpy as np
import pytest

from convqa.data import Tokenizer, build_examples, parse_corpus
from convqa.encoder import EncoderConfig
from convqa.qa_model import QAModel
from convqa.synthetic import make_corpus


def corpus_tokenizer(docs) -> Tokenizer:
    texts = [d.story for d in docs] + [t.question for d in docs for t in d.turns]
    texts += [t.answer for d in docs for t in d.turns]
    return Tokenizer.build(texts)


def tiny_model(vocab_size: int, seed: int = 0, hidden: int = 8, layers: int = 1, heads: int = 2) -> QAModel:
    cfg = EncoderConfig(num_layers=layers, num_heads=heads, hidden_dim=hidden, vocab_size=vocab_size,
                        max_seq_len=96)
    model = QAModel.initialize(cfg, seed=seed)
    # push weights away from the near-zero init so every head contributes to the loss
    rng = np.random.default_rng(seed + 1000)
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
    return model


@pytest.fixture(scope="session")
def small_docs():
    return parse_corpus(make_corpus(num_docs=4, turns=3, vocab_size=40, story_words=10, seed=3))


@pytest.fixture(scope="session")
def small_tokenizer(small_docs):
    return corpus_tokenizer(small_docs)


@pytest.fixture(scope="session")
def small_examples(small_docs, small_tokenizer):
    examples, _ = build_examples(small_docs, small_tokenizer, max_seq_len=96)
    return examples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
