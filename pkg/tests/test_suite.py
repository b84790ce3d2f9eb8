import numpy as np
import pytest

from sentvec.corpus import build_corpus, make_hard_negatives
from sentvec.suite import NEGATIVE_KINDS, NEGATIVES_PER_ROW, negative_sentences, parse_pairs


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(0, n_train=50, n_dev=400, n_test=10)


@pytest.mark.parametrize("kind", sorted(NEGATIVE_KINDS))
@pytest.mark.parametrize("lang", [0, 3])
def test_negatives_never_reproduce_a_split_sentence(corpus, kind, lang):
    dev = corpus.splits["dev"]
    seqs, ids = negative_sentences(corpus, dev, kind, lang)
    sentences = set(dev.column(lang))
    assert len(seqs) == len(ids)
    assert len(set(ids)) > 0.9 * len(dev)
    assert not any(tuple(s) in sentences for s in seqs)
    assert list(ids) == sorted(ids)
    counts = np.bincount(ids)
    assert counts.max() <= NEGATIVES_PER_ROW
    one, _ = negative_sentences(corpus, dev, kind, lang, per_row=1)
    assert len(one) == len(set(ids))


def test_all_perturbations_extend_the_seeded_order(corpus):
    row = corpus.splits["dev"].row(0)
    every = make_hard_negatives(row, "entity", None, 3, corpus.grammar)
    assert every[:2] == make_hard_negatives(row, "entity", 2, 3, corpus.grammar)
    assert len({tuple(n) for n in every}) == len(every)


def test_parse_pairs():
    assert parse_pairs("1:0, 2:2", 5) == [(1, 0), (2, 2)]
    for bad in ("1-0", "7:0", "a:b", ""):
        with pytest.raises(ValueError):
            parse_pairs(bad, 5)
