import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ragscope.model import ModelConfig, forward_trace, init_weights, layernorm
from ragscope.scores import (
    DatasetSplit, DegenerateInputError, ScoreError, ScoreTable, attended_index_set, correlation_maps, cosine,
    delta_scores, ecs_matrix, ecs_token, jsd, load_tables, logit_lens, n_attended, pearson, pks_token,
    pks_vector, response_scores, save_tables, tables_to_csv,
)

LN2 = math.log(2)


# -- jsd ---------------------------------------------------------------------

def test_jsd_identical_is_zero():
    assert jsd([0.5, 0.5], [0.5, 0.5]) == 0.0


def test_jsd_disjoint_is_ln2():
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(LN2, abs=1e-9)


def test_jsd_hand_value():
    # KL((.8,.2) || (.5,.5)) = .8 ln 1.6 + .2 ln .4, and the two terms are equal
    expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert jsd([0.8, 0.2], [0.2, 0.8]) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.1927, abs=5e-5)


def test_jsd_rejects_bad_input():
    with pytest.raises(ScoreError):
        jsd([0.5, 0.5], [1.0, 0.0, 0.0])
    with pytest.raises(ScoreError):
        jsd([0.7, 0.7], [0.5, 0.5])
    with pytest.raises(ScoreError):
        jsd([1.5, -0.5], [0.5, 0.5])


def test_jsd_is_batched():
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    q = np.array([[0.0, 1.0], [0.5, 0.5]])
    np.testing.assert_allclose(jsd(p, q), [LN2, 0.0], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 40))
def test_jsd_symmetric_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    a, b = jsd(p, q), jsd(q, p)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= LN2 + 1e-9


# -- logit lens ----------------------------------------------------------------

def _lens_weights(d=4, V=6):
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=d, d_ffn=4, vocab_size=V, max_seq_len=4)
    return init_weights(cfg, 0)


def test_logit_lens_of_zero_state_is_zero():
    w = _lens_weights()
    W_U = np.zeros((4, 6))
    W_U[:4, :4] = np.eye(4)
    w = w.replace(**{"unembed.W_U": W_U})
    np.testing.assert_array_equal(logit_lens(np.zeros(4), w), np.zeros(6))


def test_logit_lens_scale_invariance():
    w = _lens_weights()
    x = np.array([1.0, -2.0, 0.5, 0.5])
    np.testing.assert_allclose(logit_lens(x, w), logit_lens(3.7 * x, w), rtol=1e-5, atol=1e-5)


def test_logit_lens_hand_example():
    w = _lens_weights()
    g = np.array([1.0, 2.0, 0.5, 1.0])
    b = np.array([0.1, 0.0, -0.1, 0.2])
    W_U = np.arange(24, dtype=float).reshape(4, 6) / 10
    w = w.replace(**{"ln_final.w": g, "ln_final.b": b, "unembed.W_U": W_U})
    x = np.array([2.0, 0.0, -1.0, 3.0])
    mu = x.mean()
    sd = math.sqrt(((x - mu) ** 2).mean() + w.config.layernorm_epsilon)
    expected = ((x - mu) / sd * g + b) @ W_U
    np.testing.assert_allclose(logit_lens(x, w), expected, rtol=1e-5)


def test_logit_lens_rejects_nonfinite():
    with pytest.raises(ScoreError):
        logit_lens(np.array([np.nan, 0, 0, 0]), _lens_weights())


# -- ECS -------------------------------------------------------------------------

def test_n_attended_clamps():
    assert n_attended(20, 10) == 2
    assert n_attended(5, 10) == 1


def test_attended_index_set_examples():
    row = np.zeros(30)
    row[5:25] = np.linspace(0.01, 0.2, 20)
    assert attended_index_set(row, (5, 25), 10) == [23, 24]
    assert attended_index_set(np.full(10, 0.1), (2, 7), 10) == [2]
    assert attended_index_set(np.full(10, 0.1), (2, 7), 60) == [2, 3, 4]
    with pytest.raises(ScoreError):
        attended_index_set(row, (5, 5), 10)


def _trace(seed=0, T=8):
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=16, vocab_size=12, max_seq_len=16)
    w = init_weights(cfg, seed)
    toks = np.random.default_rng(seed).integers(0, 12, T).tolist()
    return w, forward_trace(w, toks)


def _with_last(tr, xl):
    x = tr.x.copy()
    x[-1] = xl
    return dataclasses.replace(tr, x=x)


@pytest.mark.parametrize("sign,expected", [(1.0, 1.0), (-1.0, -1.0)])
def test_ecs_parallel_and_antiparallel(sign, expected):
    _, tr = _trace()
    xl = tr.x_last.copy()
    xl[6] = sign * 2.5 * xl[1]
    att = np.zeros_like(tr.attention)
    att[..., 1] = 1.0
    tr = dataclasses.replace(_with_last(tr, xl), attention=att)
    assert ecs_token(tr, 6, (0, 1), (1, 4), 10) == pytest.approx(expected, abs=1e-6)


def test_ecs_orthogonal_is_zero():
    _, tr = _trace()
    xl = np.zeros_like(tr.x_last)
    xl[:] = np.eye(8)[0]
    xl[6] = np.eye(8)[3]
    tr = _with_last(tr, xl)
    assert ecs_token(tr, 6, (1, 1), (0, 5), 50) == pytest.approx(0.0, abs=1e-12)


def test_ecs_matrix_matches_per_head():
    _, tr = _trace(3, 10)
    m = ecs_matrix(tr, 8, (1, 7), 40)
    for l in range(2):
        for h in range(2):
            assert m[l, h] == pytest.approx(ecs_token(tr, 8, (l, h), (1, 7), 40), abs=1e-12)


def test_cosine_zero_vector():
    with pytest.raises(DegenerateInputError):
        cosine(np.zeros(3), np.ones(3))


# -- PKS ------------------------------------------------------------------------

def test_pks_zero_ffn_output():
    w, tr = _trace()
    x = tr.x.copy()
    x[1, 4] = tr.x_mid[1, 4]
    tr = dataclasses.replace(tr, x=x)
    assert pks_token(tr, 4, 1, w) == 0.0


def test_pks_two_token_hand_computation():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=2, d_ffn=2, vocab_size=2, max_seq_len=4)
    w = init_weights(cfg, 0).replace(**{"unembed.W_U": np.eye(2)})
    _, tr = None, forward_trace(w, [0, 1])
    x_mid = tr.x_mid.copy()
    x = tr.x.copy()
    x_mid[0, 1] = [1.0, 0.0]
    x[0, 1] = [0.0, 1.0]
    tr = dataclasses.replace(tr, x_mid=x_mid, x=x)
    # layernorm maps (1, 0) -> about (1, -1), so logits (1, -1), and the reverse
    eps = cfg.layernorm_epsilon
    a = 0.5 / math.sqrt(0.25 + eps)
    p = np.exp([a, -a]) / np.exp([a, -a]).sum()
    q = p[::-1]
    m = (p + q) / 2
    expected = 0.5 * (p * np.log(p / m)).sum() + 0.5 * (q * np.log(q / m)).sum()
    assert pks_token(tr, 1, 0, w) == pytest.approx(expected, abs=1e-6)


def test_pks_vector_matches_per_layer():
    w, tr = _trace(2)
    v = pks_vector(tr, 5, w)
    np.testing.assert_allclose(v, [pks_token(tr, 5, l, w) for l in range(2)], atol=1e-12)


# -- tables -----------------------------------------------------------------------

def _table(sid, label, ecs, pks):
    ecs = np.asarray(ecs, float)
    pks = np.asarray(pks, float)
    return ScoreTable(sid, list(range(len(pks))), ecs, pks, label)


def test_response_level_is_mean():
    t = _table("a", 0, np.zeros((3, 1, 1)), [[0.1], [0.2], [0.3]])
    assert t.response_pks[0] == pytest.approx(0.2)
    one = _table("b", 0, [[[0.4]]], [[0.7]])
    assert one.response_ecs[0, 0] == 0.4 and one.response_pks[0] == 0.7


def test_response_scores_shapes():
    w, tr = _trace(1, 10)
    t = response_scores(tr, w, (1, 6), (7, 10), "s", 1, 10)
    assert t.token_ecs.shape == (3, 2, 2) and t.token_pks.shape == (3, 2)
    assert t.positions == [7, 8, 9]
    with pytest.raises(ScoreError):
        response_scores(tr, w, (1, 6), (7, 7))


def test_table_round_trip(tmp_path):
    a = _table("a", 0, np.random.default_rng(0).random((2, 2, 2)), [[0.1, 0.2], [0.3, 0.4]])
    a.chunk_ecs, a.chunk_pks = np.ones((2, 2)), np.zeros(2)
    b = _table("b", 1, np.zeros((1, 2, 2)), [[0.5, 0.6]])
    path = tmp_path / "t.json"
    save_tables([b, a], path)
    back = load_tables(path)
    assert [t.sample_id for t in back] == ["a", "b"]
    np.testing.assert_array_equal(back[0].token_ecs, a.token_ecs)
    np.testing.assert_array_equal(back[0].chunk_ecs, a.chunk_ecs)
    assert back[1].chunk_ecs is None and back[1].label == 1
    assert tables_to_csv(back).splitlines()[0].startswith("sample_id")


def test_delta_scores_examples():
    T = [_table(f"t{i}", 0, np.full((1, 2, 2), 0.5), [[0.1, 0.1]]) for i in range(3)]
    H = [_table(f"h{i}", 1, np.full((1, 2, 2), 0.3), [[0.4, 0.1]]) for i in range(2)]
    de, dp = delta_scores(T + H, DatasetSplit.from_tables(T + H))
    np.testing.assert_allclose(de, 0.2)
    np.testing.assert_allclose(dp, [0.3, 0.0], atol=1e-12)
    same = [_table(f"x{i}", i % 2, np.full((1, 2, 2), 0.5), [[0.2, 0.2]]) for i in range(4)]
    de, dp = delta_scores(same, DatasetSplit.from_tables(same))
    assert not de.any() and not dp.any()


def test_split_validation():
    with pytest.raises(ScoreError):
        DatasetSplit(("a",), ("a",))


def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson(x, [2, 4, 5, 9]) == pytest.approx(11 / math.sqrt(130), abs=1e-12)
    with pytest.raises(DegenerateInputError):
        pearson(x, [1, 1, 1, 1])


def test_correlation_maps_signs():
    rng = np.random.default_rng(0)
    tables = []
    for i in range(40):
        y = i % 2
        ecs = rng.normal(0, 0.1, (1, 2, 2))
        ecs[0, 0, 1] += 1 - y
        pks = rng.normal(0, 0.1, (1, 2))
        pks[0, 1] += y
        tables.append(_table(f"s{i}", y, ecs, pks))
    em, pm = correlation_maps(tables)
    assert em[0, 1] > 0.9 and pm[1] > 0.9


def test_generating_span_shifts_back_one():
    from ragscope.scores import ScoreError, generating_span

    assert generating_span((5, 8)) == (4, 7)
    assert generating_span((1, 2)) == (0, 1)
    for bad in [(0, 3), (4, 4), (5, 3)]:
        with pytest.raises(ScoreError):
            generating_span(bad)
