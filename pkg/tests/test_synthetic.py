import pytest

from enctransfer.harness.corpora import make_specs
from enctransfer.harness.synthetic import (
    COLORS,
    CipherEmbedder,
    EnglishGenerator,
    check_disjoint,
    decipher,
    encipher,
    english_vocabulary,
    has_color,
    make_cipher_language,
    make_cipher_spec,
    make_pool,
    permutation_order,
)

VOCAB = english_vocabulary()


def test_identity_permutation_gives_diagonal_gold():
    spec = make_cipher_spec(0, VOCAB, "identity")
    _, gold = encipher("the red ball", spec)
    assert set(gold) == {(0, 0), (1, 1), (2, 2)}


def test_reversal_gold():
    spec = make_cipher_spec(1, VOCAB, "reverse")
    target, gold = encipher("the red ball", spec)
    assert set(gold) == {(0, 2), (1, 1), (2, 0)}
    assert target.split()[0] == spec.mapping["ball"]


def test_swap_rule():
    assert permutation_order(5, "swap") == [1, 0, 3, 2, 4]
    with pytest.raises(ValueError):
        permutation_order(3, "shuffle")


@pytest.mark.parametrize("rule", ["identity", "reverse", "swap"])
def test_round_trip_through_inverse(rule):
    spec = make_cipher_spec(2, VOCAB, rule)
    for s in EnglishGenerator(0).sample("generic", 50):
        assert decipher(encipher(s, spec)[0], spec) == s


def test_substitution_is_a_bijection_into_a_private_alphabet():
    specs = make_specs(20, seed=0)
    for spec in specs:
        assert len(spec.target_vocab) == len(VOCAB)
    check_disjoint(specs, VOCAB)


def test_collision_is_an_error():
    spec = make_cipher_spec(0, VOCAB, "identity")
    with pytest.raises(ValueError, match="collision"):
        make_cipher_language(["the red ball"], spec, existing=[spec])
    with pytest.raises(ValueError):
        make_cipher_language([], spec)
    with pytest.raises(ValueError, match="no substitution"):
        encipher("the qwxz", spec)


def test_generator_is_seeded_and_registers_differ():
    a = EnglishGenerator(3).sample("caption", 20)
    assert a == EnglishGenerator(3).sample("caption", 20)
    assert a != EnglishGenerator(4).sample("caption", 20)
    assert set(a).isdisjoint(EnglishGenerator(3).sample("generic", 20))
    unique = EnglishGenerator(5).sample("task", 200, unique=True)
    assert len(set(unique)) == 200
    assert set(EnglishGenerator(5).sample("task", 50, exclude=unique)).isdisjoint(unique)


def test_colour_property():
    assert has_color(f"a {COLORS[0]} dog")
    assert not has_color("a dog")
    task = EnglishGenerator(6).sample("task", 400)
    share = sum(map(has_color, task)) / len(task)
    assert 0.2 < share < 0.8


def test_pool_noise_and_gold():
    spec = make_cipher_spec(0, VOCAB, "identity")
    pool = make_pool(spec, 500, caption_fraction=0.3, noise=0.1, seed=1)
    mismatched = [p for p in pool if p.gold is None]
    assert 20 < len(mismatched) < 90
    for p in pool:
        if p.gold is not None:
            assert decipher(p.target, spec) == p.source


def test_cipher_embedder_shares_vectors():
    specs = make_specs(2, seed=0)
    embed = CipherEmbedder(specs)
    s = "the red ball"
    target, _ = encipher(s, specs[1])
    assert sorted(map(tuple, embed(s, "en"))) == sorted(map(tuple, embed(target, "x01")))
