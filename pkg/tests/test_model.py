import numpy as np
import pytest

from tagsdc import nn
from tagsdc.datagen import TOY_GRAMMAR
from tagsdc.model import (
    MASK_ID,
    MatchModel,
    ModelConfig,
    align_region_init,
    encode,
    itm_score,
    itm_scores,
    mlm_logits,
    pack,
    wod_probs,
    woc_logits,
)
from tagsdc.text import TokenSeq

from conftest import tiny_config


def masked(caption, pos):
    ids = list(caption.ids)
    ids[pos] = MASK_ID
    return TokenSeq(tuple(ids), caption.surfaces)


def test_token_state_count(tiny_model, dataset):
    for im in dataset[:3]:
        cap = im.captions[0]
        js = encode(tiny_model, im, cap)
        assert js.token_states.shape[1] == len(cap)
        assert js.states.shape == (1, tiny_model.config.n_prefix + len(cap), 8)


def test_zero_model(vocab, dataset):
    m = MatchModel.zeros(tiny_config(len(vocab), TOY_GRAMMAR.d_img))
    im, cap = dataset[0], dataset[0].captions[0]
    assert itm_score(m, im, cap) == 0.5
    assert np.all(encode(m, im, cap).states.data == 0)
    p = nn.softmax(mlm_logits(m, im, masked(cap, 1)), axis=-1).data
    assert np.allclose(p, 1.0 / len(vocab))
    assert np.allclose(wod_probs(m, im, cap), 0.5)


def test_region_permutation_invariance(vocab, dataset):
    tiny_model = MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img, pool="mean"), seed=11)
    im, cap = dataset[1], dataset[1].captions[2]
    perm = np.random.default_rng(0).permutation(8)
    a = itm_score(tiny_model, im.regions, cap)
    b = itm_score(tiny_model, im.regions[perm], cap)
    assert a == pytest.approx(b, abs=1e-12)


def test_token_order_matters(tiny_model, dataset):
    im, cap = dataset[0], dataset[0].captions[0]
    rev = TokenSeq(cap.ids[::-1], cap.surfaces[::-1])
    assert itm_score(tiny_model, im, cap) != itm_score(tiny_model, im, rev)


def test_itm_in_unit_interval_and_pure(tiny_model, dataset):
    ims = [im for im in dataset for _ in im.captions]
    caps = [c for im in dataset for c in im.captions]
    s = itm_scores(tiny_model, ims, caps, batch_size=7)
    assert np.all((s > 0) & (s < 1))
    assert np.array_equal(s, itm_scores(tiny_model, ims, caps, batch_size=7))
    assert np.allclose(s, itm_scores(tiny_model, ims, caps), rtol=0, atol=1e-12)
    # batching (and padding) does not change a score
    assert s[0] == pytest.approx(itm_score(tiny_model, ims[0], caps[0]), abs=1e-12)


def test_heads_shapes(tiny_model, dataset, vocab):
    im, cap = dataset[2], dataset[2].captions[0]
    assert mlm_logits(tiny_model, im, masked(cap, 0)).shape == (len(cap), len(vocab))
    assert woc_logits(tiny_model, im, cap).shape == (len(cap), len(vocab))
    p = wod_probs(tiny_model, im, cap)
    assert p.shape == (len(cap), 2) and np.allclose(p.sum(axis=1), 1)


def test_nothing_to_predict(tiny_model, dataset):
    with pytest.raises(ValueError, match="nothing to predict"):
        mlm_logits(tiny_model, dataset[0], dataset[0].captions[0])


def test_shape_errors(tiny_model, dataset):
    with pytest.raises(ValueError, match="regions"):
        encode(tiny_model, np.zeros((7, TOY_GRAMMAR.d_img)), dataset[0].captions[0])
    long = TokenSeq((6,) * 25, ("a",) * 25)
    with pytest.raises(ValueError, match="max_len"):
        encode(tiny_model, dataset[0], long)


def test_head_independence(tiny_model, dataset):
    im, cap = dataset[0], dataset[0].captions[0]
    before = itm_score(tiny_model, im, cap)
    tiny_model["wod_W"].data += 1.0
    tiny_model["woc_W2"].data += 1.0
    tiny_model["mlm_W2"].data += 1.0
    assert itm_score(tiny_model, im, cap) == before


def test_backbone_sharing(tiny_model, dataset):
    im, cap = dataset[0], dataset[0].captions[0]
    mc = masked(cap, 1)
    before = (itm_score(tiny_model, im, cap), wod_probs(tiny_model, im, cap).copy(),
              mlm_logits(tiny_model, im, mc).data.copy(), woc_logits(tiny_model, im, cap).data.copy())
    tiny_model["layer0.Wv"].data += np.random.default_rng(0).normal(0, 0.3, (8, 8))
    after = (itm_score(tiny_model, im, cap), wod_probs(tiny_model, im, cap),
             mlm_logits(tiny_model, im, mc).data, woc_logits(tiny_model, im, cap).data)
    assert before[0] != after[0]
    for a, b in zip(before[1:], after[1:]):
        assert not np.allclose(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_img=4, d=10, n_heads=4)


def test_align_region_init(vocab):
    m = MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img), seed=0)
    words = TOY_GRAMMAR.concept_words()
    align_region_init(m, vocab, words)
    for k, w in enumerate(words):
        assert np.array_equal(m["reg_W"].data[k], m["tok_emb"].data[vocab.lookup[w]])
    with pytest.raises(ValueError):
        align_region_init(m, vocab, words[:-1])


def test_pack_pads_right(tiny_model, dataset):
    caps = [dataset[0].captions[0], TokenSeq((6,), ("a",))]
    _, ids, lengths = pack(tiny_model, dataset[:2], caps)
    assert list(lengths) == [len(caps[0]), 1]
    assert np.all(ids[1, 1:] == 0)


def test_copy_and_state(tiny_model):
    c = tiny_model.copy()
    c["itm_b"].data += 1
    assert tiny_model["itm_b"].data[0] == 0
    tiny_model.load_state(c.state())
    assert tiny_model["itm_b"].data[0] == 1


@pytest.fixture
def cls_model(vocab):
    return MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img, pool="cls"), seed=4)


def test_summary_slot_layout(cls_model, dataset):
    im, cap = dataset[0], dataset[0].captions[1]
    js = encode(cls_model, im, cap)
    assert js.states.shape == (1, 1 + 8 + len(cap), 8)
    assert js.token_states.shape[1] == len(cap)
    assert cls_model.config.n_prefix == 9
    assert "cls_emb" in {n for n, _ in ((p.name, p) for p in cls_model.backbone_params())}


def test_summary_slot_permutation_invariance(cls_model, dataset):
    im, cap = dataset[3], dataset[3].captions[0]
    perm = np.random.default_rng(1).permutation(8)
    a = itm_score(cls_model, im.regions, cap)
    assert a == pytest.approx(itm_score(cls_model, im.regions[perm], cap), abs=1e-12)


def test_summary_slot_zero_model(vocab, dataset):
    m = MatchModel.zeros(tiny_config(len(vocab), TOY_GRAMMAR.d_img, pool="cls"))
    assert itm_score(m, dataset[0], dataset[0].captions[0]) == 0.5


def test_pool_validation(vocab):
    with pytest.raises(ValueError):
        tiny_config(len(vocab), TOY_GRAMMAR.d_img, pool="max")


def test_pooling_differs(vocab, dataset):
    from dataclasses import replace

    mean = MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img, pool="mean"), seed=4)
    cls = MatchModel.init(replace(mean.config, pool="cls"), seed=4)
    im, cap = dataset[0], dataset[0].captions[0]
    assert itm_score(mean, im, cap) != itm_score(cls, im, cap)
