import numpy as np
import pytest

from tagsdc.datagen import (
    FULL_GRAMMAR,
    MAGIC,
    N_CAPTIONS,
    TOY_GRAMMAR,
    LatentScene,
    canonical_form,
    caption_corpus,
    generate_dataset,
    get_grammar,
    grammar_for_model,
    load_checkpoint,
    read_checkpoint,
    read_jsonl,
    realize,
    sample_realizations,
    save_checkpoint,
    scene_regions,
    write_jsonl,
)
from tagsdc.scenegraph import mask_candidates
from tagsdc.model import MatchModel, itm_scores
from tagsdc.scenegraph import parse_scene_graph

from conftest import tiny_config


def test_single_image_consistent(lexicon):
    (im,) = generate_dataset(1, seed=0)
    assert len(im.captions) == N_CAPTIONS
    forms = {canonical_form(parse_scene_graph(c, lexicon), c.surfaces) for c in im.captions}
    assert len(forms) == 1


def test_pure_in_seed():
    a, b = generate_dataset(20, seed=4), generate_dataset(20, seed=4)
    assert a == b
    assert a != generate_dataset(20, seed=5)


@pytest.mark.parametrize("grammar", [TOY_GRAMMAR, FULL_GRAMMAR])
def test_distinct_captions_and_candidates(grammar, lexicon):
    data = generate_dataset(1000, seed=11, grammar=grammar)
    for im in data:
        assert len({c.text for c in im.captions}) == N_CAPTIONS
        assert im.regions.shape == (8, grammar.d_img)
        assert any(mask_candidates(parse_scene_graph(c, lexicon), c).spans for c in im.captions)


def test_region_construction():
    g = TOY_GRAMMAR
    scene = LatentScene(((2, 1), (5, -1)), ((0, 0, 1),))
    r = scene_regions(scene, np.random.default_rng(0), noise=0.0)
    want = np.zeros((8, g.d_img))
    want[0, 2] = want[0, len(g.nouns) + 1] = 1.0
    want[1, 5] = 1.0
    want[2, len(g.nouns) + len(g.adjectives)] = 1.0
    want[2, 2] = want[2, 5] = 0.5
    assert np.array_equal(r, want)
    noisy = scene_regions(scene, np.random.default_rng(0))
    assert np.all(noisy[3:] == 0)
    assert 0.02 < np.std(noisy[:3] - want[:3]) < 0.08
    with pytest.raises(ValueError):
        scene_regions(LatentScene(((0, 0), (1, 1), (2, 2)), ((0, 0, 1), (1, 1, 2))),
                      np.random.default_rng(0), n_regions=4)


def test_scene_validation():
    with pytest.raises(ValueError):
        LatentScene(())
    with pytest.raises(ValueError):
        LatentScene(((0, 0),), ((0, 0, 1),))


def test_realization_gold_graph():
    g = TOY_GRAMMAR
    scene = LatentScene(((0, 0), (1, -1)), ((3, 0, 1),))
    words, graph = realize(scene, (0, 1), (0, 0), 0, g)
    assert " ".join(words).endswith("a red man in front of a woman")
    (span, a, b), = graph.relations
    assert words[span[0]:span[1]] == ("in", "front", "of") and (a, b) == (0, 1)
    assert [words[s] for s, _ in graph.objects] == ["man", "woman"]
    reals = sample_realizations(scene, np.random.default_rng(0))
    assert len({w for w, _ in reals}) == N_CAPTIONS


def test_caption_corpus_length():
    assert len(caption_corpus(7, seed=1)) == 7


def test_grammar_lookup():
    assert get_grammar("full") is FULL_GRAMMAR
    with pytest.raises(ValueError):
        get_grammar("huge")
    m = MatchModel.init(tiny_config(len(FULL_GRAMMAR.vocabulary()), FULL_GRAMMAR.d_img), seed=0)
    assert grammar_for_model(m.config) is FULL_GRAMMAR


def test_full_grammar_sizes():
    assert (len(FULL_GRAMMAR.nouns), len(FULL_GRAMMAR.adjectives), len(FULL_GRAMMAR.relations)) == (60, 25, 15)
    assert FULL_GRAMMAR.d_img == 100 and TOY_GRAMMAR.d_img == 18


# ------------------------------------------------------------------ JSONL

def test_jsonl_round_trip(tmp_path):
    data = generate_dataset(10, seed=2)
    p = tmp_path / "d.jsonl"
    write_jsonl(data, p)
    back = read_jsonl(p)
    assert back == data
    assert all(np.array_equal(a.regions, b.regions) for a, b in zip(data, back))


def test_jsonl_full_grammar(tmp_path):
    data = generate_dataset(3, seed=2, grammar="full")
    write_jsonl(data, tmp_path / "f.jsonl")
    assert read_jsonl(tmp_path / "f.jsonl", FULL_GRAMMAR.vocabulary()) == data


def test_jsonl_empty(tmp_path):
    write_jsonl([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""
    assert read_jsonl(tmp_path / "e.jsonl") == []


def test_jsonl_truncated(tmp_path):
    p = tmp_path / "t.jsonl"
    write_jsonl(generate_dataset(3, seed=0), p)
    text = p.read_text()
    p.write_text(text[: len(text) - 40])
    with pytest.raises(ValueError, match="line 3"):
        read_jsonl(p)


@pytest.mark.parametrize("line", [
    '{"image_id": 0, "regions": [0.0], "captions": ["a man"]}',
    '{"image_id": 0, "captions": ["a man"]}',
    '{"image_id": "x", "regions": [[0.0]], "captions": ["a man"]}',
])
def test_jsonl_bad_record(tmp_path, line):
    p = tmp_path / "u.jsonl"
    p.write_text('{"image_id": 0, "regions": [[0.0]], "captions": ["a man"]}\n' + line + "\n")
    with pytest.raises(ValueError, match="line 2"):
        read_jsonl(p)


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path, vocab):
    m = MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img, n_heads=2, n_regions=6), seed=3)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert list(back.params) == list(m.params)
    for k, v in m.state().items():
        assert np.array_equal(back.state()[k], v)
        assert back.state()[k].tobytes() == v.tobytes()
    assert back.config == m.config


def test_checkpoint_behavior(tmp_path, vocab):
    m = MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img), seed=3)
    data = generate_dataset(4, seed=0)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    ims = [im for im in data for _ in range(2)]
    caps = [c for im in data for c in im.captions[:2]]
    assert np.array_equal(itm_scores(m, ims, caps), itm_scores(back, ims, caps))


def test_checkpoint_header(tmp_path, tiny_model):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, p)
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(read_checkpoint(p))


@pytest.mark.parametrize("damage", ["magic", "version", "truncate"])
def test_checkpoint_corruption(tmp_path, tiny_model, damage):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, p)
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 9
    else:
        raw = raw[: len(raw) // 2]
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_checkpoint_keeps_pooling(tmp_path, vocab):
    m = MatchModel.init(tiny_config(len(vocab), TOY_GRAMMAR.d_img, pool="cls"), seed=1)
    save_checkpoint(m, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.config == m.config
    data = generate_dataset(2, seed=0)
    caps = [im.captions[0] for im in data]
    assert np.array_equal(itm_scores(m, data, caps), itm_scores(back, data, caps))
