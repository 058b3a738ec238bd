import json

import numpy as np
import pytest

from ragscope.corpus import (
    CorpusError, FactTriple, Sample, SampleFormatError, Vocab, World, WorldConfig, build_conflict_samples,
    build_consistent_samples, build_world, conflict_prompt, containment_label, generate_fact_corpus,
    load_samples, render_prompt, save_samples,
)
from ragscope.model import ModelConfig, init_weights


def test_single_fact_corpus():
    facts, seqs, vocab = generate_fact_corpus(0, 1, 1)
    assert len(facts) == 1 and len(seqs) == 1
    assert vocab.decode(seqs[0])[-2] == "<ans>"


def test_corpus_is_deterministic_with_unique_keys():
    a = generate_fact_corpus(3, 20, 4)
    b = generate_fact_corpus(3, 20, 4)
    assert a[0] == b[0] and a[1] == b[1]
    keys = [f.key for f in a[0]]
    assert len(keys) == len(set(keys)) == 80
    assert all(set(f.to_list()) <= set(a[2].tokens) for f in a[0])


def test_vocab_overflow_and_bad_counts():
    with pytest.raises(CorpusError):
        generate_fact_corpus(0, 600, 1)
    with pytest.raises(CorpusError):
        generate_fact_corpus(0, 0, 1)
    with pytest.raises(CorpusError):
        Vocab.build(3, 1, 2).id("nope")


def _small_world(**kw):
    cfg = dict(n_known=6, n_unknown=6, n_relations=2, n_objects=8, repeats=2, seed=1)
    cfg.update(kw)
    return build_world(WorldConfig(**cfg))


def test_world_is_deterministic_and_round_trips(tmp_path):
    w = _small_world()
    assert _small_world().sequences == w.sequences
    w.save(tmp_path / "w.json")
    back = World.load(tmp_path / "w.json")
    assert back.known == w.known and back.masks == w.masks
    d = json.loads((tmp_path / "w.json").read_text())
    d["known"][0][2] = "o99"
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(CorpusError):
        World.load(tmp_path / "bad.json")


def test_world_masks_mark_answer_predictions():
    w = _small_world()
    for seq, m in zip(w.sequences, w.masks):
        assert len(seq) == len(m) and sum(m) == 2
        i = m.index(1.0)
        assert w.vocab.decode([seq[i + 1]]) == ["<ans>"]


def test_sample_spans_recover_partition():
    v = Vocab.build(4, 1, 4)
    ctx = v.encode(["s0", "r0", "o1", "s1", "r0", "o2"])
    s = Sample("x", v.encode(["s0", "r0"]), ctx, v.encode(["<ans>", "o1"]), 0)
    toks = s.tokens(v)
    (c0, c1), (r0, r1) = s.spans()
    assert toks[c0:c1] == ctx
    assert toks[r0:r1] == s.response
    assert toks[c1 + 1 : r0] == s.query
    assert render_prompt(v, ctx, s.query) == toks[:r0]


def test_sample_validation():
    with pytest.raises(CorpusError):
        Sample("x", [1], [2], [], 0)
    with pytest.raises(CorpusError):
        Sample("x", [1], [2], [3], 2)


def test_containment_label():
    assert containment_label([5, 7], 7, 9) == 0
    assert containment_label([5, 9], 7, 9) == 1
    assert containment_label([5, 6], 7, 9) is None
    assert containment_label([7, 9], 7, 9) is None


def test_conflict_prompt_rejects_true_object():
    w = _small_world()
    f = w.known[0]
    assert conflict_prompt(w, f, f.obj, np.random.default_rng(0)) is None


def _weights_for(world):
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ffn=16, vocab_size=len(world.vocab), max_seq_len=32)
    return init_weights(cfg, 0)


def _echo_decoder(world):
    """Emits the object the context pairs with the queried key, as a context-following model would."""
    v = world.vocab

    def run(prompt):
        q = prompt[-2:]
        ctx = prompt[2:-3]
        for i in range(0, len(ctx), 3):
            if ctx[i : i + 2] == q:
                return [v.id("<ans>"), ctx[i + 2]]
        raise AssertionError("query not in context")

    return run


def test_echo_model_labels_everything_context_following():
    w = _small_world(facts_per_context=3)
    samples, stats = build_conflict_samples(w, _weights_for(w), 0, variants=3, min_accuracy=0.0,
                                            decoder=_echo_decoder(w))
    assert stats.kept == len(samples) == stats.attempted
    assert samples and all(s.label == 0 for s in samples)
    for s in samples:
        assert s.meta["context_obj"] != s.meta["memory_obj"]


def test_conflict_samples_are_reproducible():
    w = _small_world()
    weights = _weights_for(w)
    a, sa = build_conflict_samples(w, weights, 5, variants=2, min_accuracy=0.0)
    b, sb = build_conflict_samples(w, weights, 5, variants=2, min_accuracy=0.0)
    assert [x.to_json() for x in a] == [x.to_json() for x in b] and sa == sb
    assert sa.kept + sa.discarded + sa.rejected == sa.attempted


def test_conflicts_need_memorisation():
    w = _small_world()
    with pytest.raises(CorpusError):
        build_conflict_samples(w, _weights_for(w), 0)


def test_consistent_samples_meta():
    w = _small_world()
    samples, _ = build_consistent_samples(w, _weights_for(w), 0)
    assert len(samples) == len(w.facts)
    assert all(s.meta["kind"] == "consistent" for s in samples)


def test_samples_round_trip(tmp_path):
    w = _small_world()
    samples, _ = build_conflict_samples(w, _weights_for(w), 0, variants=2, min_accuracy=0.0,
                                        decoder=_echo_decoder(w))
    p = tmp_path / "s.jsonl"
    save_samples(samples, p)
    back = load_samples(p)
    assert [s.to_json() for s in back] == [s.to_json() for s in samples]
    assert [s.spans() for s in back] == [s.spans() for s in samples]


def test_empty_file_loads_empty(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_samples(tmp_path / "e.jsonl") == []


def test_missing_label_names_field_and_line(tmp_path):
    good = {"id": "a", "query_tokens": [1], "context_tokens": [2], "response_tokens": [3], "label": 0}
    bad = dict(good)
    del bad["label"]
    (tmp_path / "b.jsonl").write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(SampleFormatError, match=r"line 2: missing field 'label'"):
        load_samples(tmp_path / "b.jsonl")
    (tmp_path / "c.jsonl").write_text("{not json\n")
    with pytest.raises(SampleFormatError, match="line 1"):
        load_samples(tmp_path / "c.jsonl")


def test_default_world_uses_two_context_facts():
    from ragscope.corpus import WorldConfig
    from ragscope.detector import DetectorConfig

    assert WorldConfig().facts_per_context == 2
    assert DetectorConfig().chunk_size == 2
