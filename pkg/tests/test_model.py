import numpy as np
import pytest
from conftest import tiny_config

from relattn import numerics as nx
from relattn.model import (
    AttentionRecord,
    Checkpoint,
    ConfigurationError,
    CrossAttentionOverride,
    ModelConfig,
    Seq2Seq,
    blend,
    generate,
    load_checkpoint,
    save_checkpoint,
    source_ids,
)
from relattn.numerics import Tensor
from relattn.relevance import RelevanceParams, blend_weight_zero_shot, zero_shot_control
from relattn.text import PAD, SEP


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=0)


def test_encode_shape_and_determinism():
    m = Seq2Seq.init(ModelConfig(vocab_size=30), seed=0)
    ids = list(range(4, 14))
    a, b = m.encode(ids), m.encode(ids)
    assert a.h_enc.shape == (10, 64) and a.r_d.shape == (10, 64)
    assert np.array_equal(a.h_enc.data, b.h_enc.data)


def test_encode_truncates(small_vocab):
    m = Seq2Seq.init(tiny_config(len(small_vocab), max_src_len=5), seed=0)
    assert m.encode([5] * 9).n == 5


def test_pad_tail_does_not_change_unmasked_rows(tiny_model):
    ids = [5, 6, 7, 8]
    short = tiny_model.encode(ids + [PAD])
    long = tiny_model.encode(ids + [PAD, PAD, PAD])
    assert np.allclose(short.h_enc.data[:4], long.h_enc.data[:4], atol=1e-12)
    assert not long.mask[4:].any()


def test_encode_rejects_all_pad(tiny_model):
    with pytest.raises(nx.DegenerateMaskError):
        tiny_model.encode([PAD, PAD])


def test_decoder_causality(tiny_model):
    enc = tiny_model.encode([5, 6, 7, 8, 9])
    a = tiny_model.decode(enc, [2, 10, 11, 12, 13]).data
    b = tiny_model.decode(enc, [2, 10, 11, 20, 21]).data
    assert np.array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def _override(model, enc, w, seed=0):
    r = np.random.default_rng(seed).random(enc.n)
    rel = Tensor((r / r.sum()).reshape(1, -1))
    cfg = model.config
    return rel, CrossAttentionOverride(rel, np.full((cfg.n_dec_layers, cfg.n_heads), w))


def test_override_w0_is_bitwise_noop(tiny_model):
    enc = tiny_model.encode([5, 6, 7, 8, 9])
    _, ov = _override(tiny_model, enc, 0.0)
    a = tiny_model.decode(enc, [2, 10, 11]).data
    b = tiny_model.decode(enc, [2, 10, 11], ov).data
    assert np.array_equal(a, b)


def test_override_w1_equals_relevance(tiny_model):
    enc = tiny_model.encode([5, 6, 7, 8, 9])
    rel, ov = _override(tiny_model, enc, 1.0)
    rec = AttentionRecord()
    tiny_model.decode(enc, [2, 10, 11], ov, rec)
    for key in rec.keys():
        if key[0] == "cross":
            rows = rec.matrix(*key)
            assert np.array_equal(rows, np.repeat(rel.data, 3, axis=0))


def test_blend_example():
    out = blend(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), 0.5).data
    assert out.tolist() == [[0.5, 0.5]]
    with pytest.raises(nx.ShapeError):
        blend(Tensor([[1.0, 0.0]]), Tensor([[1.0]]), 0.5)
    with pytest.raises(nx.ParameterError):
        blend(Tensor([[1.0]]), Tensor([[1.0]]), 1.5)


def test_cross_attention_single_head(tiny_model):
    enc = tiny_model.encode([5, 6, 7])
    h = Tensor(np.random.default_rng(0).normal(size=(2, tiny_model.config.d_model)))
    ctx, attn = tiny_model.cross_attention(h, enc, 0, 1)
    rel = Tensor([[0.2, 0.3, 0.5]])
    ctx_b, attn_b = tiny_model.cross_attention(h, enc, 0, 1, (rel, 0.25))
    assert ctx.shape == (2, tiny_model.config.d_head)
    assert np.allclose(attn_b.data, 0.25 * rel.data + 0.75 * attn.data, atol=1e-15)
    assert np.allclose(attn_b.data.sum(axis=1), 1.0, atol=1e-9)


def test_relevance_length_mismatch(tiny_model):
    enc = tiny_model.encode([5, 6, 7])
    ov = CrossAttentionOverride(Tensor([[0.5, 0.5]]), np.zeros((2, 2)))
    with pytest.raises(nx.ShapeError):
        tiny_model.decode(enc, [2], ov)


def test_attention_rows_are_distributions(tiny_model, small_vocab, small_corpus):
    ex = small_corpus[0]
    rec = AttentionRecord()
    generate(tiny_model, small_vocab, ex, "relattn", zero_shot_control(16, 0.3), rec)
    enc_rec = AttentionRecord()
    tiny_model.encode(source_ids(ex, small_vocab, "doc-only"), enc_rec)
    for r in (rec, enc_rec):
        for rows in r.rows.values():
            for row in rows:
                assert np.allclose(np.atleast_2d(row).sum(axis=1), 1.0, atol=1e-9)


def test_generate_modes(tiny_model, small_vocab, small_corpus):
    ex = small_corpus[1]
    doc, _ = generate(tiny_model, small_vocab, ex, "doc-only")
    rel, _ = generate(tiny_model, small_vocab, ex, "relattn", zero_shot_control(16, 0.0))
    assert doc == rel
    assert len(doc) <= tiny_model.config.max_tgt_len
    ids = source_ids(ex, small_vocab, "prefix")
    assert ids[len(ex.aspects)] == small_vocab.id(SEP)
    with pytest.raises(ConfigurationError):
        generate(tiny_model, small_vocab, ex, "relattn")
    with pytest.raises(ConfigurationError):
        generate(tiny_model, small_vocab, ex, "beam")


@pytest.mark.parametrize("max_len", [1, 3, 7])
def test_greedy_respects_max_len(tiny_model, max_len):
    enc = tiny_model.encode([5, 6, 7])
    assert len(tiny_model.greedy(enc, max_len=max_len)) <= max_len


def test_batched_sweep_matches_individual(tiny_model, small_vocab, small_corpus):
    ex = small_corpus[2]
    enc = tiny_model.encode(source_ids(ex, small_vocab, "doc-only"))
    control = zero_shot_control(16, 0.0)
    rel = control.relevance(tiny_model, enc, small_vocab.encode(ex.aspects)).values
    grid = [0.0, 0.2, 0.5, 0.9, 1.0]
    batched = tiny_model.greedy_sweep(enc, rel, grid)
    for w, out in zip(grid, batched):
        ov = CrossAttentionOverride(rel, blend_weight_zero_shot(w, 2, 2))
        assert out == tiny_model.greedy(enc, ov)


def test_checkpoint_roundtrip(tmp_path, tiny_model, small_vocab, small_corpus):
    state = RelevanceParams.identity(16, "few-shot").state()
    path = tmp_path / "m.json"
    save_checkpoint(path, Checkpoint(tiny_model, small_vocab, state, {"seed": 3}))
    back = load_checkpoint(path)
    assert back.model.config == tiny_model.config
    assert back.vocab == small_vocab and back.meta == {"seed": 3}
    for name, p in tiny_model.params.items():
        assert np.array_equal(back.model.params[name].data, p.data)
    assert set(back.relattn) == set(state)
    ex = small_corpus[0]
    assert generate(back.model, back.vocab, ex)[0] == generate(tiny_model, small_vocab, ex)[0]
    # a base checkpoint loads without the relevance namespace
    save_checkpoint(path, Checkpoint(tiny_model, small_vocab))
    assert load_checkpoint(path).relattn is None


def test_load_rejects_other_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"kind": "something"}')
    with pytest.raises(ConfigurationError):
        load_checkpoint(p)
