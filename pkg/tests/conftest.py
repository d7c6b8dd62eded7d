import numpy as np
import pytest

from adatrig.corpus import Corpus, TaggedSentence, Token


def make_sentence(doc_id, sent_index, words, tags, pos=None, attrs=None):
    tokens = tuple(
        Token(w, pos[i] if pos else None, attrs[i] if attrs else None)
        for i, w in enumerate(words)
    )
    return TaggedSentence(doc_id, sent_index, tokens, tuple(tags))


@pytest.fixture
def tiny_corpus():
    sents = (
        make_sentence("d0", 0, ["the", "dog", "barked"], ["O", "O", "EVENT"]),
        make_sentence("d0", 1, ["it", "ran", "home"], ["O", "EVENT", "O"]),
        make_sentence("d1", 0, ["the", "cat", "slept"], ["O", "O", "EVENT"]),
        make_sentence("d2", 0, ["birds", "sang", "loudly"], ["O", "EVENT", "O"]),
    )
    return Corpus("tiny", sents)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
