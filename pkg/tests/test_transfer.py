import json

import numpy as np
import pytest

from enctransfer.alignment import AlignmentLinkSet
from enctransfer.encoder import Encoder, EncoderConfig, HiddenStack, trainable_names
from enctransfer.harness import corpora
from enctransfer.harness.experiment import ABLATIONS, desk_transfer_config
from enctransfer.harness.synthetic import COLORS, EnglishGenerator, encipher, english_vocabulary, make_cipher_spec
from enctransfer.harness.teacher import build_teacher
from enctransfer.tokenizer import TokenizedSentence, train_bpe
from enctransfer.transfer import (
    NoLinksError,
    ProjectionHead,
    TransferConfig,
    TransferItem,
    align_loss,
    batch_loss_and_grads,
    create_heads,
    heads_from_sections,
    heads_to_sections,
    layer_mix,
    lr_at,
    mean_loss,
    swap_and_encode,
    total_loss,
    train_transfer,
)

from gradcheck import check_gradients, tiny_problem

RNG = np.random.default_rng(0)
SMALL = EncoderConfig(vocab_size=12, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16, max_positions=16)


def head(projection="bottleneck", input_variant="weighted_layers", target=2):
    return ProjectionHead.create(target, 3, 8, projection, input_variant, np.random.default_rng(1))


def stack(T=4, states=3, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return HiddenStack([rng.normal(size=(T, d)) for _ in range(states)])


def sentence(ids):
    return TokenizedSentence(tuple(ids), (-1,) + tuple(range(len(ids) - 2)) + (-1,), "")


def identity_item(ids):
    n = len(ids)
    return TransferItem(sentence(ids), sentence(ids), AlignmentLinkSet([(i, i) for i in range(n)], n, n))


# ------------------------------------------------------------------ heads

def test_zero_logits_mix_uniformly():
    h = head()
    assert np.allclose(h.mixture_weights(), 1 / 3)
    s = stack()
    identity = head("identity")
    assert np.allclose(layer_mix(s, identity), np.mean(s.states, axis=0))


def test_saturated_logit_selects_one_layer():
    h = head("identity")
    h.params["logits"] = np.array([0.0, 50.0, 0.0])
    assert h.mixture_weights().max() > 1 - 1e-9
    assert h.mixture_weights().sum() == pytest.approx(1.0, abs=1e-9)


def test_identity_last_layer_returns_matched_state():
    s = stack()
    out = layer_mix(s, head("identity", "last_layer", target=2))
    assert np.array_equal(out, s[2])


def test_head_parameter_counts():
    assert head("identity").num_parameters == 0
    assert head("linear").num_parameters == 8 * 8 + 8
    assert set(head("linear").params) == {"logits", "w", "b"}
    assert head("bottleneck").num_parameters > 0
    with pytest.raises(ValueError):
        ProjectionHead.create(1, 3, 8, "mlp", "weighted_layers", RNG)


def test_layer_mix_rejects_mismatched_requests():
    with pytest.raises(ValueError):
        layer_mix(stack(), head(target=2), 1)
    with pytest.raises(ValueError):
        layer_mix(stack(states=4), head())


def test_head_sections_round_trip():
    heads = [head("linear", target=1), head("bottleneck", target=2)]
    again = heads_from_sections(heads_to_sections(heads), 3, 8)
    assert [(h.target_layer, h.projection) for h in again] == [(1, "linear"), (2, "bottleneck")]
    s = stack()
    assert np.array_equal(layer_mix(s, again[1]), layer_mix(s, heads[1]))


# ----------------------------------------------------------------- losses

def test_align_loss_examples():
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.zeros((2, 2))
    assert align_loss(h, g, [(0, 0), (1, 1)]) == pytest.approx(0.5)
    assert align_loss(h, h, [(0, 0), (1, 1)]) == 0.0
    assert align_loss(h, g, [(0, 0), (1, 1)], reduction="sum") == pytest.approx(1.0)


def test_duplicated_links_leave_align_loss_unchanged():
    rng = np.random.default_rng(2)
    h, g = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    links = [(0, 1), (2, 3), (1, 0)]
    assert align_loss(h, g, links + links) == pytest.approx(align_loss(h, g, links), abs=1e-15)


def test_align_loss_errors():
    with pytest.raises(NoLinksError):
        align_loss(np.zeros((2, 2)), np.zeros((2, 2)), [])
    with pytest.raises(ValueError):
        align_loss(np.zeros((2, 2)), np.zeros((2, 2)), [(2, 0)])


def test_mean_loss_examples():
    x = np.random.default_rng(3).normal(size=(3, 2))
    assert mean_loss(x, x) == 0.0
    a, b = np.array([[1.0, 3.0]]), np.array([[0.0, 1.0]])
    assert mean_loss(a, b) == pytest.approx(np.mean((a - b) ** 2))
    assert mean_loss(np.ones((2, 2)), np.zeros((3, 2))) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mean_loss(np.zeros((0, 2)), np.zeros((1, 2)))


def test_total_loss_single_layer_and_align_only():
    t, s = stack(seed=1), stack(seed=2)
    links = AlignmentLinkSet([(0, 0), (1, 2), (3, 3)], 4, 4)
    config = TransferConfig(target_layers=(2,), projection_variant="identity")
    h = create_heads(config, Encoder(SMALL))
    out = total_loss(t, s, h, links, config)
    assert out.total == pytest.approx(out.align[0] + out.mean[0])
    only = TransferConfig(target_layers=(1, 2), loss_variant="align_only", projection_variant="identity")
    out = total_loss(t, s, create_heads(only, Encoder(SMALL)), links, only)
    assert out.mean == [0.0, 0.0]
    assert out.total == pytest.approx(np.mean(out.align))


def test_zero_loss_fixed_point():
    enc = Encoder(SMALL)
    config = TransferConfig(projection_variant="identity", input_variant="last_layer")
    heads = create_heads(config, enc)
    ids = [0, 5, 3, 7, 1]
    links = AlignmentLinkSet([(i, i) for i in range(5)], 5, 5)
    assert total_loss(enc.forward(ids), enc.copy().forward(ids), heads, links, config).total < 1e-10
    _, _, total, _, _ = batch_loss_and_grads(enc, enc.copy(), heads, [identity_item(ids)], config)
    assert total < 1e-10


def test_batched_loss_matches_per_item_loss():
    teacher, student, heads, items, config = tiny_problem(4)
    _, _, total, _, _ = batch_loss_and_grads(teacher, student, heads, items, config, need_grads=False)
    single = [total_loss(teacher.forward(it.teacher.token_ids), student.forward(it.student.token_ids),
                         heads, it.links, config).total for it in items]
    assert total == pytest.approx(sum(single), rel=1e-12)


def test_items_without_links_keep_the_mean_term():
    teacher, student, heads, _, config = tiny_problem(5)
    item = TransferItem(sentence([1, 2, 3]), sentence([4, 5]), AlignmentLinkSet([], 3, 2))
    a, m, total, _, _ = batch_loss_and_grads(teacher, student, heads, [item], config)
    assert a == [0.0] * len(heads)
    assert total == pytest.approx(np.mean(m)) and total > 0


# -------------------------------------------------------------- gradients

@pytest.mark.parametrize("variant", [
    {},
    {"projection": "linear"},
    {"projection": "identity", "input_variant": "last_layer"},
    {"loss_variant": "align_only"},
])
def test_gradients_match_finite_differences(variant):
    errors = check_gradients(seed=1, **variant)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, worst


# --------------------------------------------------------------- training

def test_lr_schedule():
    config = TransferConfig(learning_rate=0.5, warmup_ratio=0.1)
    assert lr_at(0, 100, config) == 0.0
    assert lr_at(5, 100, config) == pytest.approx(0.25)
    assert lr_at(10, 100, config) == pytest.approx(0.5)
    assert lr_at(55, 100, config) == pytest.approx(0.25)
    assert lr_at(100, 100, config) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TransferConfig(loss_variant="align")
    with pytest.raises(ValueError):
        TransferConfig(target_layers=())
    with pytest.raises(ValueError):
        TransferConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TransferConfig(target_layers=(5,)).resolve_target_layers(4)


def test_frozen_blocks_stay_bitwise_identical():
    teacher, student, heads, items, _ = tiny_problem(6)
    config = desk_transfer_config(trainable_layers=1, epochs=2, batch_size=2)
    before = {k: v.copy() for k, v in student.params.items()}
    train_transfer(teacher, student, heads, items, config)
    moving = trainable_names(student.config, 1)
    for name, value in student.params.items():
        if name in moving:
            continue
        assert np.array_equal(value, before[name]), name
    assert any(not np.array_equal(student.params[n], before[n]) for n in moving)
    for h in heads:
        assert h.mixture_weights().sum() == pytest.approx(1.0, abs=1e-9)


def test_training_log_file(tmp_path):
    teacher, student, heads, items, _ = tiny_problem(7)
    config = desk_transfer_config(epochs=3, batch_size=2)
    result = train_transfer(teacher, student, heads, items, config, log_path=tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"epoch", "step", "lr", "align", "mean", "total"}
    assert rows[-1]["total"] == result.log[-1].total


def test_empty_data_is_rejected():
    teacher, student, heads, _, config = tiny_problem(0)
    with pytest.raises(ValueError):
        train_transfer(teacher, student, heads, [], config)


def test_worker_count_is_bitwise_invariant():
    runs = []
    for workers in (1, 3):
        teacher, student, heads, items, _ = tiny_problem(8)
        config = desk_transfer_config(epochs=2, batch_size=3, chunk_size=1, workers=workers)
        result = train_transfer(teacher, student, heads, items * 2, config)
        runs.append((result.student.params, [h.params for h in result.heads], [r.total for r in result.log]))
    (pa, ha, la), (pb, hb, lb) = runs
    assert la == lb
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert all(np.array_equal(x[k], y[k]) for x, y in zip(ha, hb) for k in x)


@pytest.mark.parametrize("exp", sorted(ABLATIONS))
def test_every_ablation_trains_to_a_finite_loss(exp):
    loss, input_variant, projection = ABLATIONS[exp]
    teacher, student, heads, items, _ = tiny_problem(9, projection=projection, input_variant=input_variant,
                                                     loss_variant=loss)
    result = train_transfer(teacher, student, heads, items, desk_transfer_config(batch_size=2))
    assert np.isfinite(result.log[0].total)


@pytest.fixture(scope="module")
def cipher_task():
    """Teacher, items and vocabularies for a one-language word-level cipher task."""
    english = EnglishGenerator(0).sample("task", 400)
    spec = make_cipher_spec(0, english_vocabulary(), "identity", seed=0)
    # Vocabularies large enough that every word is a single token, so exact
    # agreement with the teacher is reachable.
    tv = train_bpe(english, 1024)
    sv = train_bpe(english + [encipher(s, spec)[0] for s in english], 2048)
    shape = dict(hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=32, max_positions=64)
    teacher = build_teacher(EncoderConfig(len(tv), seed=1, **shape), tv, COLORS, 4.0)
    items = corpora.english_items(english[:200], tv, sv) + corpora.gold_items(english[200:], spec, tv, sv)
    student = Encoder(EncoderConfig(len(sv), seed=2, **shape))
    return teacher, student, items


def test_cipher_task_loss_falls_tenfold(cipher_task):
    teacher, student, items = cipher_task
    config = desk_transfer_config(epochs=30)
    student = student.copy()
    heads = create_heads(config, student)
    untrained = [r.copy() for r in swap_and_encode(student, heads, items[0].student)]
    result = train_transfer(teacher, student, heads, items, config)
    totals = np.array([r.total for r in result.log])
    assert totals[-1] < 0.1 * totals[0]
    smooth = np.convolve(totals, np.ones(5) / 5, mode="valid")
    tail = smooth[len(totals) - int(0.8 * len(totals)):]
    assert np.all(np.diff(tail) <= 1e-12)

    english = items[0]
    reps = swap_and_encode(student, heads, english.student)
    assert len(reps) == len(heads)
    t_stack = teacher.forward(english.teacher.token_ids)
    for h, r in zip(heads, reps):
        assert r.shape == (len(english.student), 16)
        assert align_loss(t_stack[h.target_layer], r, english.links) < 2 * totals[-1]
        assert np.mean((t_stack[h.target_layer] - untrained[heads.index(h)]) ** 2) > 0
