import numpy as np
import pytest

from ragscope.corpus import answer_mask, closed_book_prompt, generate_fact_corpus
from ragscope.model import ModelConfig, greedy_decode, init_weights
from ragscope.train import (
    TrainConfig, TrainingDiverged, finite_difference_check, loss_and_grads, loss_only, make_batch, train_toy,
)


def _corpus():
    return [[1, 2, 3, 4, 5], [1, 3, 5, 7], [2, 4, 6, 8, 10, 1]]


def test_zero_learning_rate_keeps_init(small_config):
    res = train_toy(small_config, _corpus(), TrainConfig(learning_rate=0.0, steps=1, batch_size=2, seed=4))
    assert res.weights.allclose(init_weights(small_config, 4))


def test_training_is_deterministic(small_config):
    hp = TrainConfig(steps=20, batch_size=2, seed=9)
    a = train_toy(small_config, _corpus(), hp)
    b = train_toy(small_config, _corpus(), hp)
    assert a.weights.allclose(b.weights)
    assert a.losses == b.losses


def test_training_reduces_loss(small_config):
    res = train_toy(small_config, _corpus(), TrainConfig(steps=150, batch_size=3, seed=0))
    assert res.losses[-1] < res.losses[0]


def test_tied_embeddings_stay_tied(small_config):
    res = train_toy(small_config, _corpus(), TrainConfig(steps=10, batch_size=2, tie_embeddings=True))
    np.testing.assert_array_equal(res.weights["embed.W_E"], res.weights["unembed.W_U"].T)


def test_masks_select_loss_positions(small_config):
    w = init_weights(small_config, 0)
    toks, _ = make_batch(_corpus(), None, np.arange(3))
    m = np.zeros_like(toks, dtype=np.float64)
    m[0, 1] = 1.0
    _, g = loss_and_grads(w.astype(np.float64), toks, m)
    assert np.isfinite(loss_only(w.astype(np.float64), toks, m))
    # examples other than row 0 must not influence the loss
    toks2 = toks.copy()
    toks2[1:, :] = 1
    assert loss_only(w.astype(np.float64), toks, m) == pytest.approx(loss_only(w.astype(np.float64), toks2, m))


def test_gradients_match_finite_differences(small_config):
    w = init_weights(small_config, 2)
    toks, mask = make_batch(_corpus(), None, np.arange(3))
    err = finite_difference_check(w, toks, mask, n_params=200, seed=1)
    assert err.max() <= 1e-3


def test_empty_corpus_rejected(small_config):
    with pytest.raises(ValueError):
        train_toy(small_config, [], TrainConfig(steps=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_config):
    with pytest.raises(TrainingDiverged):
        train_toy(small_config, _corpus(), TrainConfig(learning_rate=1e30, steps=30, batch_size=3, clip_norm=0.0))


@pytest.mark.slow
def test_two_hundred_facts_are_memorised():
    facts, seqs, vocab = generate_fact_corpus(0, 50, 4)
    assert len(facts) == 200
    cfg = ModelConfig(vocab_size=len(vocab), max_seq_len=16)
    m = [answer_mask(len(s), 4) for s in seqs]
    res = train_toy(cfg, seqs, TrainConfig(), masks=m)
    hits = sum(
        greedy_decode(res.weights, closed_book_prompt(vocab, vocab.encode(f.key)), 2)[-1] == vocab.id(f.obj)
        for f in facts
    )
    assert hits / len(facts) >= 0.95
