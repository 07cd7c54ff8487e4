import numpy as np
import pytest

from sevae.data import Clause, SEType, build_vocab, make_synthetic_corpus


@pytest.fixture(scope="session")
def synth_corpus():
    return make_synthetic_corpus(12, seed=0)


@pytest.fixture(scope="session")
def synth_vocab(synth_corpus):
    return build_vocab(synth_corpus, min_count=1)


@pytest.fixture(scope="session")
def eight_clause_fixture():
    """Two docs, two paragraphs each, one label repeated; covers all 7 labels
    so perfect train accuracy implies perfect macro-F1. Every label carries
    distinct surface tokens, so bag-of-words scorers can separate the set
    too and any architecture can drive training accuracy to 100%."""
    rows = [
        ("the cat remains calm .", SEType.STATE, "d0", 0, 0),
        ("the dog jumped yesterday .", SEType.EVENT, "d0", 0, 1),
        ("the judge declared that it happened .", SEType.REPORT, "d0", 1, 0),
        ("cats remain calm .", SEType.GENERIC, "d0", 1, 1),
        ("the farmer usually sleeps .", SEType.GENERALIZING, "d1", 0, 0),
        ("can the bird reach the roof ?", SEType.QUESTION, "d1", 0, 1),
        ("reach the roof now !", SEType.IMPERATIVE, "d1", 1, 0),
        ("the engine collapsed yesterday .", SEType.EVENT, "d1", 1, 1),
    ]
    return [Clause(text, label, "news", doc, par, idx)
            for text, label, doc, par, idx in rows]


def rand_ids(rng, vocab_size, length):
    return [int(x) for x in rng.integers(5, vocab_size, size=length)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
