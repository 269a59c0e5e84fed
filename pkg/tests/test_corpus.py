import numpy as np
import pytest

from mohawk import corpus
from mohawk.core import ContractError, substream


def test_generation_is_deterministic():
    assert np.array_equal(corpus.generate(3, 5000), corpus.generate(3, 5000))
    assert not np.array_equal(corpus.generate(3, 5000), corpus.generate(4, 5000))


def test_file_encoding(tmp_path):
    toks = corpus.generate(0, 1000)
    path = tmp_path / "c.u16"
    corpus.write_tokens(path, toks)
    assert path.stat().st_size == 2000
    assert np.array_equal(corpus.read_tokens(path), toks)
    raw = path.read_bytes()
    assert int.from_bytes(raw[:2], "little") == toks[0]


def test_unigram_perplexity_matches_analytic():
    toks = corpus.generate(1, 300_000)
    emp = corpus.empirical_unigram_perplexity(toks)
    assert abs(emp - corpus.unigram_perplexity()) <= 0.02 * corpus.unigram_perplexity()


def test_unigram_law_is_a_distribution():
    p = corpus.unigram_probs()
    assert p.shape == (256,) and np.all(p > 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert corpus.unigram_entropy() == pytest.approx(np.log(corpus.unigram_perplexity()), rel=1e-12)


def test_brackets_are_well_nested():
    toks = corpus.generate(2, 20_000)
    stack = []
    for t in toks:
        if t < 16:
            stack.append(t)
            assert len(stack) <= corpus.MAX_DEPTH + 6  # initial stack can be up to MAX_DEPTH deep
        elif t < 32 and stack:
            assert t - 16 == stack.pop()


def test_background_chain_is_doubly_stochastic():
    P = corpus.background_transition()
    assert np.allclose(P.sum(0), 1) and np.allclose(P.sum(1), 1)


def test_split_and_windows():
    toks = np.arange(100)
    train, held = corpus.split(toks, 0.1)
    assert len(train) == 90 and held[0] == 90
    w = corpus.sample_windows(train, 4, 10, substream(0, "w"))
    assert w.shape == (4, 10)
    assert np.all(np.diff(w, axis=1) == 1)
    hw = corpus.heldout_windows(held, 3)
    assert hw.shape == (3, 3) and hw[0, 0] == 90
    with pytest.raises(ContractError):
        corpus.sample_windows(np.arange(5), 1, 6, substream(0, "w"))
    with pytest.raises(ContractError):
        corpus.generate(0, 0)


def test_heldout_unigram_baseline_is_close_to_analytic():
    toks = corpus.generate(5, 200_000)
    train, held = corpus.split(toks)
    base = corpus.heldout_unigram_perplexity(train, held)
    assert abs(base - corpus.unigram_perplexity()) <= 0.02 * corpus.unigram_perplexity()
