import numpy as np
import pytest

from tagsdc.datagen import TOY_GRAMMAR, generate_dataset
from tagsdc.model import MatchModel, ModelConfig
from tagsdc.scenegraph import load_lexicon
from tagsdc.text import tokenize


@pytest.fixture(scope="session")
def vocab():
    return TOY_GRAMMAR.vocabulary()


@pytest.fixture(scope="session")
def full_vocab():
    from tagsdc.datagen import FULL_GRAMMAR

    return FULL_GRAMMAR.vocabulary()


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon()


@pytest.fixture(scope="session")
def dataset(vocab):
    return generate_dataset(6, seed=3, vocab=vocab)


def tiny_config(vocab_size, d_img, **kw):
    base = dict(vocab_size=vocab_size, d_img=d_img, d=8, n_layers=1, n_heads=2, d_ff=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(vocab):
    return MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def caption(full_vocab):
    return tokenize(full_vocab, "a young man carrying a red ball")


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
        if rep.when == "call"
        for name, value in rep.user_properties
        if name == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
