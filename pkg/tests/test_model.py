import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ragscope.model import (
    CapacityError, Intervention, ModelConfig, ModelError, Weights, forward_logits, forward_trace,
    greedy_decode, init_weights, layernorm, nll, nll_from_logits, reconstruct_residual, softmax,
    tensor_shapes, zero_block_weights,
)


def test_tensor_shapes_cover_weights(small_config, small_weights):
    shapes = tensor_shapes(small_config)
    assert list(small_weights) == list(shapes)
    for name, shape in shapes.items():
        assert small_weights[name].shape == shape


def test_weights_are_read_only(small_weights):
    with pytest.raises(ValueError):
        small_weights["embed.W_E"][0, 0] = 1.0


def test_weights_reject_wrong_shape(small_config, small_weights):
    with pytest.raises(ValueError):
        small_weights.replace(**{"embed.W_E": np.zeros((2, 2))})


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    assert ModelConfig.from_json(ModelConfig().to_json()) == ModelConfig()


def test_zero_blocks_pass_embeddings_through(small_config):
    w = zero_block_weights(small_config, seed=0)
    tr = forward_trace(w, [1, 4, 2, 7])
    np.testing.assert_array_equal(tr.x_last, tr.x0)
    assert reconstruct_residual(tr, 2) == 0.0


def test_attention_rows_are_causal_distributions(small_weights):
    tr = forward_trace(small_weights, [1, 2, 3, 4, 5, 6])
    np.testing.assert_allclose(tr.attention.sum(-1), 1.0, atol=1e-6)
    T = tr.n_positions
    upper = np.triu(np.ones((T, T), bool), k=1)
    assert np.all(tr.attention[..., upper] == 0)


def test_trace_is_deterministic(small_config):
    a = forward_trace(init_weights(small_config, 5), [3, 1, 4, 1, 5])
    b = forward_trace(init_weights(small_config, 5), [3, 1, 4, 1, 5])
    for f in ("x0", "attention", "head_out", "x_mid", "ffn_out", "x", "logits"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_trace_shapes(small_config, small_weights):
    c = small_config
    tr = forward_trace(small_weights, [1, 2, 3])
    assert tr.attention.shape == (c.n_layers, c.n_heads, 3, 3)
    assert tr.head_out.shape == (c.n_layers, c.n_heads, 3, c.d_model)
    assert tr.logits.shape == (3, c.vocab_size)


def test_out_of_range_tokens_rejected(small_weights):
    with pytest.raises(ModelError):
        forward_trace(small_weights, [1, 99])
    with pytest.raises(ModelError):
        forward_trace(small_weights, [])
    with pytest.raises(CapacityError):
        forward_trace(small_weights, [1] * 17)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 12))
def test_reconstruction_holds_for_random_models(seed, T):
    cfg = ModelConfig(n_layers=3, n_heads=2, d_model=8, d_ffn=16, vocab_size=13, max_seq_len=16)
    w = init_weights(cfg, seed)
    toks = np.random.default_rng(seed).integers(0, 13, T).tolist()
    tr = forward_trace(w, toks)
    assert max(reconstruct_residual(tr, i) for i in range(T)) <= 1e-4


def test_reconstruction_detects_tampering(small_weights):
    tr = forward_trace(small_weights, [1, 2, 3, 4])
    head_out = tr.head_out.copy()
    head_out[1, 0, 2, 3] += 1.0
    import dataclasses

    bad = dataclasses.replace(tr, head_out=head_out)
    assert reconstruct_residual(bad, 2) > 1e-4
    with pytest.raises(IndexError):
        reconstruct_residual(tr, 4)


def test_scaled_reconstruction(small_config, small_weights):
    hs = np.array([[2.0, 0.5], [1.0, 3.0]], np.float32)
    fs = np.array([10.0, 0.0], np.float32)
    tr = forward_trace(small_weights, [1, 2, 3, 4], Intervention(head_scale=hs, ffn_scale=fs))
    assert max(reconstruct_residual(tr, i) for i in range(4)) <= 1e-4


def test_position_restricted_scaling_leaves_other_positions(small_weights):
    toks = [1, 2, 3, 4, 5]
    base = forward_trace(small_weights, toks)
    hs = np.full((2, 2), 4.0, np.float32)
    tr = forward_trace(small_weights, toks, Intervention(head_scale=hs, positions=(-1,)))
    np.testing.assert_array_equal(tr.logits[:-1], base.logits[:-1])
    assert not np.allclose(tr.logits[-1], base.logits[-1])
    assert reconstruct_residual(tr, 4) <= 1e-4


def test_layernorm_matches_hand_computation():
    x = np.array([1.0, 2.0, 3.0, 6.0])
    y = layernorm(x, np.ones(4), np.zeros(4), 0.0)[0]
    mu, var = 3.0, np.mean((x - 3.0) ** 2)
    np.testing.assert_allclose(y, (x - mu) / math.sqrt(var))


def test_softmax_is_stable():
    p = softmax(np.array([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0])


def test_greedy_decode_basics(small_weights):
    prompt = [1, 2, 3]
    assert greedy_decode(small_weights, prompt, 0) == prompt
    a = greedy_decode(small_weights, prompt, 5)
    assert a == greedy_decode(small_weights, prompt, 5)
    assert a == greedy_decode(small_weights, prompt, 5, hook=lambda step, toks, tr: None)
    assert a[:3] == prompt and len(a) == 8
    with pytest.raises(CapacityError):
        greedy_decode(small_weights, prompt, 14)


def test_greedy_decode_stops_at_eos(small_weights):
    out = greedy_decode(small_weights, [1, 2], 5)
    first = out[2]
    assert greedy_decode(small_weights, [1, 2], 5, eos_id=first) == [1, 2, first]


def _uniform_model(V=16):
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ffn=4, vocab_size=V, max_seq_len=8)
    w = init_weights(cfg, 0)
    return w.replace(**{"unembed.W_U": np.zeros((4, V))})


def test_nll_of_uniform_model_is_log_vocab():
    w = _uniform_model()
    assert nll(w, [1, 2], [3, 4, 5]) == pytest.approx(math.log(16), abs=1e-6)


def test_nll_hand_logits():
    logits = np.zeros((5, 3))
    logits[1] = [2.0, 0.0, 0.0]
    logits[2] = [0.0, 1.0, 0.0]
    logits[3] = [0.0, 0.0, 3.0]
    resp = [0, 1, 2]
    expected = np.mean([
        -math.log(math.e**2 / (math.e**2 + 2)),
        -math.log(math.e / (math.e + 2)),
        -math.log(math.e**3 / (math.e**3 + 2)),
    ])
    assert nll_from_logits(logits, 2, resp) == pytest.approx(expected, rel=1e-12)


def test_nll_of_certain_model_is_zero():
    logits = np.full((4, 3), -1e4)
    logits[1, 2] = logits[2, 0] = 1e4
    assert nll_from_logits(logits, 2, [2, 0]) == 0.0


def test_nll_rejects_empty(small_weights):
    with pytest.raises(ModelError):
        nll(small_weights, [1], [])


def test_noise_heads_are_seeded(small_weights):
    iv = Intervention(noise_heads=((0, 1),), noise_seed=7)
    a = forward_logits(small_weights, [1, 2, 3], iv)
    b = forward_logits(small_weights, [1, 2, 3], iv)
    assert np.array_equal(a, b)
    c = forward_logits(small_weights, [1, 2, 3], Intervention(noise_heads=((0, 1),), noise_seed=8))
    assert not np.array_equal(a, c)
