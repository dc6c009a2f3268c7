import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enctransfer.alignment import (
    NULL,
    AlignmentLinkSet,
    PriorCounts,
    TranslationTable,
    align_words,
    corpus_log_likelihood,
    derive_priors,
    em_train,
    identity_word_links,
    project_to_subwords,
    read_pharaoh,
    symmetrize,
    symmetrize_grow_diag,
    viterbi_align,
    write_pharaoh,
)
from enctransfer.tokenizer import TokenizedSentence

from oracles import grow_diag_reference, ibm1_em, ibm1_log_likelihood

GOLDEN = Path(__file__).parent / "data" / "grow_diag_golden.tsv"


def links(text, src_len, tgt_len):
    return AlignmentLinkSet.from_pharaoh("" if text == "-" else text, src_len, tgt_len)


def golden_cases():
    cases = []
    for line in GOLDEN.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        name, s, t, fwd, rev, exp = line.split("\t")
        s, t = int(s), int(t)
        cases.append(pytest.param(links(fwd, s, t), links(rev, s, t), links(exp, s, t), id=name))
    return cases


def table_from(rows: dict, targets):
    """Table with explicit rows; keys are source words (NULL included)."""
    sources = [w for w in rows if w != NULL]
    table = TranslationTable.uniform(sources, targets)
    for s, probs in rows.items():
        table.prob[table.src_index[s]] = probs
    return table


# ------------------------------------------------------------------ link sets

def test_link_set_bounds_and_set_semantics():
    ls = AlignmentLinkSet([(0, 1), (0, 1), (1, 0)], 2, 2)
    assert len(ls) == 2
    with pytest.raises(ValueError):
        AlignmentLinkSet([(2, 0)], 2, 2)
    with pytest.raises(ValueError):
        AlignmentLinkSet([(0, -1)], 2, 2)


def test_pharaoh_round_trip(tmp_path):
    sets = [AlignmentLinkSet([(1, 0), (0, 1)], 2, 2), AlignmentLinkSet([], 1, 3)]
    assert sets[0].to_pharaoh() == "0-1 1-0"
    path = tmp_path / "a.pharaoh"
    write_pharaoh(sets, path)
    assert read_pharaoh(path, [(2, 2), (1, 3)]) == sets


# ------------------------------------------------------------------------ EM

def test_em_single_pair_posterior_ties_with_null():
    for iterations in (1, 10):
        table = em_train([("a", "x")], iterations)
        # A single target word makes every row put all its mass on "x"; the
        # E-step posterior of the a-x link against NULL stays at one half.
        posterior = table("a", "x") / (table("a", "x") + table(NULL, "x"))
        assert posterior == pytest.approx(0.5, abs=1e-12)
        assert table.prob.sum(axis=1) == pytest.approx(1.0, abs=1e-12)


def test_uniform_before_training():
    history = []
    em_train([("a b", "x y z")], 1, history=history)
    assert np.allclose(history[0].prob, 1.0 / 3)


def test_two_pair_corpus_matches_oracle():
    pairs = [("a b", "x y"), ("a", "x")]
    table = em_train(pairs, 2)
    assert table("a", "x") > table("a", "y")
    oracle = ibm1_em(pairs, 2)
    for s, row in oracle.items():
        for w, p in row.items():
            assert table(s, w) == pytest.approx(p, abs=1e-12)


def test_em_errors():
    with pytest.raises(ValueError):
        em_train([], 3)
    with pytest.raises(ValueError, match="2"):
        em_train([("a", "x"), ("b", "")], 3)


def test_log_likelihood_examples():
    table = table_from({NULL: [0.5, 0.5], "a": [0.5, 0.5]}, ["x", "y"])
    assert corpus_log_likelihood(table, [("a", "x")]) == pytest.approx(math.log(0.5))
    table = table_from({NULL: [0.0, 1.0], "a": [1.0, 0.0]}, ["x", "y"])
    assert corpus_log_likelihood(table, [("a", "x")]) == pytest.approx(math.log(0.5))


def test_log_likelihood_matches_oracle():
    pairs = [("der hund", "the dog"), ("der", "the"), ("hund bellt", "dog barks")]
    table = em_train(pairs, 4)
    assert corpus_log_likelihood(table, pairs) == pytest.approx(
        ibm1_log_likelihood(ibm1_em(pairs, 4), pairs), abs=1e-10)


def test_worker_count_does_not_change_the_table():
    rng = np.random.default_rng(3)
    pairs = [(" ".join(f"s{k}" for k in rng.integers(0, 20, 5)), " ".join(f"t{k}" for k in rng.integers(0, 20, 6)))
             for _ in range(300)]
    a = em_train(pairs, 3, workers=1)
    b = em_train(pairs, 3, workers=3)
    assert np.array_equal(a.prob, b.prob)


words = st.sampled_from(["a", "b", "c", "d"])
tgt_words = st.sampled_from(["w", "x", "y", "z"])
toy_pairs = st.lists(
    st.tuples(st.lists(words, min_size=1, max_size=4).map(" ".join),
              st.lists(tgt_words, min_size=1, max_size=4).map(" ".join)),
    min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(pairs=toy_pairs)
def test_em_monotone_and_row_stochastic(pairs):
    history = []
    em_train(pairs, 8, history=history)
    lls = [corpus_log_likelihood(t, pairs) for t in history]
    assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))
    for t in history:
        assert np.allclose(t.prob.sum(axis=1), 1.0, atol=1e-9)
        assert (t.prob >= 0).all() and (t.prob <= 1).all()


# ---------------------------------------------------------------- priors

def test_prior_examples():
    table = table_from({NULL: [0.5, 0.5], "a": [1.0, 0.0]}, ["x", "y"])
    assert all(c == 0 for c in derive_priors(table, 0.0).counts.values())
    assert derive_priors(table, 10.0).counts[("a", "x")] == pytest.approx(10.0)
    with pytest.raises(ValueError):
        derive_priors(table, -1.0)
    with pytest.raises(ValueError):
        PriorCounts({("a", "x"): -1.0})


def test_zero_strength_prior_equals_plain_training():
    pairs = [("a b", "x y"), ("a", "y")]
    table = table_from({NULL: [0.5, 0.5], "a": [1.0, 0.0], "b": [0.0, 1.0]}, ["x", "y"])
    plain = em_train(pairs, 5)
    primed = em_train(pairs, 5, derive_priors(table, 0.0))
    assert np.array_equal(plain.prob, primed.prob)


def test_strong_prior_overrides_the_corpus():
    pairs = [("a", "y"), ("a b", "y x")]
    assert em_train(pairs, 5)("a", "y") > em_train(pairs, 5)("a", "x")
    pool = table_from({NULL: [0.5, 0.5], "a": [1.0, 0.0]}, ["x", "y"])
    prior = derive_priors(pool, 50.0)
    primed = em_train(pairs, 5, prior)
    assert primed("a", "x") > primed("a", "y")
    oracle = ibm1_em(pairs, 5, prior.counts)
    assert primed("a", "x") == pytest.approx(oracle["a"]["x"], abs=1e-12)


# --------------------------------------------------------------- viterbi

def test_viterbi_examples():
    table = table_from({NULL: [0.0, 1.0], "a": [1.0, 0.0]}, ["x", "y"])
    assert set(viterbi_align(table, ("a", "x"))) == {(0, 0)}
    table = table_from({NULL: [0.9, 0.1], "a": [0.5, 0.5]}, ["x", "y"])
    assert set(viterbi_align(table, ("a", "x"))) == set()
    table = table_from({NULL: [0.1, 0.9], "a": [0.5, 0.5], "b": [0.5, 0.5]}, ["x", "y"])
    assert set(viterbi_align(table, ("a b", "x"))) == {(0, 0)}


# ------------------------------------------------------------- grow-diag

@pytest.mark.parametrize("forward,reverse,expected", golden_cases())
def test_grow_diag_golden(forward, reverse, expected):
    assert symmetrize_grow_diag(forward, reverse) == expected


def test_golden_suite_size():
    assert len(golden_cases()) >= 10


def test_grow_diag_length_mismatch():
    with pytest.raises(ValueError):
        symmetrize_grow_diag(AlignmentLinkSet([], 2, 2), AlignmentLinkSet([], 2, 3))


def link_sets(n=5, m=5):
    return st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, m - 1)), max_size=10)


@settings(max_examples=150, deadline=None)
@given(f=link_sets(), r=link_sets())
def test_grow_diag_properties(f, r):
    fwd, rev = AlignmentLinkSet(f, 5, 5), AlignmentLinkSet(r, 5, 5)
    out = symmetrize_grow_diag(fwd, rev).links
    assert (f & r) <= out <= (f | r)
    assert out == grow_diag_reference(f, r, 5, 5)
    assert symmetrize_grow_diag(fwd, fwd) == fwd


def test_other_symmetrizations():
    f = AlignmentLinkSet([(0, 0), (1, 1)], 2, 2)
    r = AlignmentLinkSet([(0, 0), (1, 0)], 2, 2)
    assert set(symmetrize(f, r, "intersection")) == {(0, 0)}
    assert set(symmetrize(f, r, "union")) == {(0, 0), (1, 1), (1, 0)}
    with pytest.raises(ValueError):
        symmetrize(f, r, "grow-diag-final")


def test_der_hund_oracle():
    pairs = [("der hund", "the dog"), ("der", "the"), ("hund", "dog")]
    for iterations in (3, 5, 10):
        assert set(align_words(pairs, iterations)[0]) == {(0, 0), (1, 1)}


# ------------------------------------------------------------- projection

def tokenized(word_index):
    return TokenizedSentence(tuple(range(len(word_index))), tuple(word_index), "")


def test_projection_examples():
    src = tokenized([-1, 0, 0, 1, -1])
    tgt = tokenized([-1, 0, 1, -1])
    out = project_to_subwords(AlignmentLinkSet([(0, 0)], 2, 2), src, tgt)
    assert set(out) == {(1, 1), (2, 1)}
    assert (out.src_len, out.tgt_len) == (5, 4)
    assert len(project_to_subwords(AlignmentLinkSet([], 2, 2), src, tgt)) == 0
    one = tokenized([-1, 0, 1, -1])
    word = AlignmentLinkSet([(0, 1), (1, 0)], 2, 2)
    assert set(project_to_subwords(word, one, one)) == {(1, 2), (2, 1)}


def test_projection_rejects_out_of_range_words():
    src = tokenized([-1, 0, -1])
    with pytest.raises(ValueError):
        project_to_subwords(AlignmentLinkSet([(1, 0)], 2, 1), src, src)


@settings(max_examples=80, deadline=None)
@given(src_sizes=st.lists(st.integers(1, 3), min_size=1, max_size=4),
       tgt_sizes=st.lists(st.integers(1, 3), min_size=1, max_size=4), data=st.data())
def test_projection_size(src_sizes, tgt_sizes, data):
    src = tokenized([-1] + [w for w, n in enumerate(src_sizes) for _ in range(n)] + [-1])
    tgt = tokenized([-1] + [w for w, n in enumerate(tgt_sizes) for _ in range(n)] + [-1])
    word = data.draw(st.sets(st.tuples(st.integers(0, len(src_sizes) - 1), st.integers(0, len(tgt_sizes) - 1))))
    out = project_to_subwords(AlignmentLinkSet(word, len(src_sizes), len(tgt_sizes)), src, tgt)
    assert len(out) == sum(src_sizes[i] * tgt_sizes[j] for i, j in word)
    assert all(src.word_index[i] >= 0 and tgt.word_index[j] >= 0 for i, j in out)


def test_identity_word_links():
    assert set(identity_word_links(3)) == {(0, 0), (1, 1), (2, 2)}
