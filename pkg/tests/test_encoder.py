import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enctransfer.encoder import (
    Encoder,
    EncoderConfig,
    HiddenStack,
    clamp_trainable_layers,
    gelu,
    gelu_grad,
    init_param_names,
    init_params,
    load_checkpoint,
    mean_pool,
    pad_batch,
    save_checkpoint,
    trainable_names,
)

TINY = EncoderConfig(vocab_size=10, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16, max_positions=8, seed=3)


def test_init_is_seeded():
    a, b = init_params(TINY), init_params(TINY)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(EncoderConfig(**{**TINY.__dict__, "seed": 4}))
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_layer_norm_and_biases():
    p = init_params(TINY)
    for name, value in p.items():
        if name.endswith((".g",)):
            assert np.all(value == 1.0)
        elif name.endswith((".b", "bq", "bk", "bv", "bo", "b1", "b2")):
            assert np.all(value == 0.0)
    assert sorted(p) == sorted(init_param_names(TINY))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, hidden_dim=6, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)


def test_gelu_exact_erf_form():
    assert gelu(np.array(0.0)) == 0.0
    assert gelu(np.array(1.0)) == pytest.approx(0.8413, abs=1e-4)
    x = np.linspace(-3, 3, 13)
    h = 1e-6
    assert np.allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(layers=st.integers(1, 3), heads=st.sampled_from([1, 2, 4]), length=st.integers(1, 8))
def test_stack_shapes(layers, heads, length):
    config = EncoderConfig(vocab_size=7, hidden_dim=8, num_layers=layers, num_heads=heads, ffn_dim=12,
                           max_positions=8)
    stack = Encoder(config).forward(list(np.arange(length) % 7))
    assert len(stack) == layers + 1
    assert all(s.shape == (length, 8) for s in stack.states)


def test_forward_is_deterministic():
    enc = Encoder(TINY)
    a, b = enc.forward([1, 2, 3]), enc.forward([1, 2, 3])
    assert all(np.array_equal(x, y) for x, y in zip(a.states, b.states))


def test_padding_does_not_leak():
    enc = Encoder(TINY)
    ids, mask = pad_batch([[1, 2, 3], [4, 5]])
    batched, _ = enc.forward_batch(ids, mask, keep_cache=False)
    alone = enc.forward([4, 5])
    for k in range(len(alone)):
        assert np.allclose(batched[k][1, :2], alone[k], atol=1e-12)


def test_rejects_bad_ids():
    enc = Encoder(TINY)
    with pytest.raises(ValueError):
        enc.forward([10])
    with pytest.raises(ValueError):
        enc.forward(list(range(9)))


def test_zero_upstream_gives_zero_gradients():
    enc = Encoder(TINY)
    grads = enc.backward([1, 2, 3], {2: np.zeros((3, 8))})
    assert all(not g.any() for g in grads.values())


def test_backward_matches_finite_differences():
    enc = Encoder(TINY)
    ids = [1, 4, 7]
    rng = np.random.default_rng(0)
    upstream = {k: rng.normal(size=(3, 8)) for k in range(3)}

    def objective():
        stack = enc.forward(ids)
        return sum(float((stack[k] * u).sum()) for k, u in upstream.items())

    grads = enc.backward(ids, upstream)
    eps = 1e-4
    for name, param in enc.params.items():
        flat = param.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = objective()
            flat[i] = old - eps
            down = objective()
            flat[i] = old
            numeric[i] = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 1e-8:
            assert np.linalg.norm(analytic - numeric) / scale < 1e-4, name


def test_mean_pool_examples():
    assert np.array_equal(mean_pool(HiddenStack([np.array([[3.0, 4.0]])]), 0), [3.0, 4.0])
    stack = HiddenStack([np.array([[1.0, 0.0], [0.0, 1.0]])])
    assert np.allclose(mean_pool(stack, 0), [0.5, 0.5])
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.allclose(mean_pool(HiddenStack([x]), 0), mean_pool(HiddenStack([x[::-1]]), 0))


def test_trainable_blocks_and_clamp(caplog):
    top = trainable_names(TINY, 1)
    assert top and all(n.startswith("layers.1.") for n in top)
    assert "tok_emb" not in trainable_names(TINY, 2)
    with caplog.at_level(logging.WARNING):
        assert clamp_trainable_layers(TINY, 6) == 3
    assert "clamping" in caplog.text
    assert trainable_names(TINY, 6) == set(init_param_names(TINY))
    assert trainable_names(TINY, 0) == set()


def test_checkpoint_round_trip(tmp_path):
    enc = Encoder(TINY)
    extra = {"head.2.weighted_layers.linear": {"w": np.eye(8), "b": np.zeros(8)}}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, enc.config, enc.params, extra)
    config, params, sections = load_checkpoint(path)
    assert config == TINY
    for name, value in enc.params.items():
        assert np.array_equal(params[name], value.astype(np.float32).astype(np.float64))
    assert np.array_equal(sections["head.2.weighted_layers.linear"]["w"], np.eye(8))
    assert path.read_bytes()[8:].startswith(b"ENCCKPT 1\n")


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "x.ckpt"
    text = b"NOTCKPT 1\n[end]\n"
    path.write_bytes(len(text).to_bytes(8, "little") + text)
    with pytest.raises(ValueError):
        load_checkpoint(path)
