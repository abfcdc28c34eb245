"""Toy image-caption dataset: grammar captions, latent-scene regions, and I/O.

Every image is a :class:`LatentScene` of one to three entities linked in a
chain by optional relations. Captions are surface realizations of the
scene; regions are one-hot encodings of the same scene plus Gaussian noise,
so a learnable cross-modal alignment exists by construction.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .scenegraph import SceneGraph
from .text import MAX_LEN, TokenSeq, build_vocabulary, tokenize

NOUNS = (
    "man", "woman", "boy", "girl", "dog", "cat", "horse", "bird", "ball", "car",
    "bike", "tree", "table", "chair", "cup", "bottle", "hat", "shirt", "bag", "book",
    "phone", "laptop", "kite", "boat", "bench", "fence", "flower", "pizza", "cake", "apple",
    "banana", "umbrella", "clock", "lamp", "window", "door", "truck", "bus", "train", "plane",
    "sheep", "cow", "elephant", "giraffe", "zebra", "bear", "frisbee", "surfboard", "skateboard",
    "guitar", "sofa", "bed", "vase", "sign", "plate", "bowl", "knife", "teddy", "racket", "helmet",
)
ADJECTIVES = (
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange", "pink", "purple",
    "gray", "young", "old", "small", "large", "tall", "short", "wooden", "metal", "striped",
    "wet", "dry", "shiny", "dirty", "empty",
)
RELATIONS = (
    "holding", "carrying", "riding", "wearing", "watching", "pushing", "next to",
    "in front of", "behind", "under", "above", "near", "on top of", "beside", "sitting on",
)
DETERMINERS = ("a", "the", "one")
FRAMES = ((), ("there", "is"), ("here", "is"), ("we", "see"), ("this", "shows"))
CONJUNCTION = "and"
N_CAPTIONS = 5
N_REGIONS = 8
NOISE = 0.05

_VERBS = {"holding", "carrying", "riding", "wearing", "watching", "pushing", "sitting"}


@dataclass(frozen=True)
class Grammar:
    """Terminal inventory of the caption grammar.

    Region features have one dimension per noun, adjective and relation,
    in that order, so ``d_img`` follows from the inventory size.
    """

    nouns: tuple
    adjectives: tuple
    relations: tuple
    determiners: tuple = DETERMINERS
    frames: tuple = FRAMES
    conjunction: str = CONJUNCTION

    @property
    def d_img(self):
        return len(self.nouns) + len(self.adjectives) + len(self.relations)

    def role_lexicon(self):
        """Word -> role map for every terminal."""
        lex = {w: "NOUN" for w in self.nouns}
        lex.update({w: "ADJ" for w in self.adjectives})
        for phrase in self.relations:
            for w in phrase.split():
                lex[w] = "VERB" if w in _VERBS else "PREP"
        lex.update({w: "DET" for w in self.determiners})
        for frame in self.frames:
            lex.update({w: "STOP" for w in frame})
        lex[self.conjunction] = "STOP"
        return lex

    def corpus(self):
        return list(self.role_lexicon())

    def vocabulary(self):
        return build_vocabulary(self.corpus())

    def concept_words(self):
        """Head word of every region dimension (first word of multi-word relations)."""
        return list(self.nouns) + list(self.adjectives) + [r.split()[0] for r in self.relations]


FULL_GRAMMAR = Grammar(NOUNS, ADJECTIVES, RELATIONS)
TOY_GRAMMAR = Grammar(
    nouns=("man", "woman", "dog", "cat", "horse", "ball", "car", "tree"),
    adjectives=("red", "blue", "green", "black", "white", "small"),
    relations=("holding", "riding", "next to", "in front of"),
)
GRAMMARS = {"toy": TOY_GRAMMAR, "full": FULL_GRAMMAR}


def get_grammar(grammar):
    if isinstance(grammar, Grammar):
        return grammar
    try:
        return GRAMMARS[grammar]
    except KeyError:
        raise ValueError(f"unknown grammar {grammar!r}; choose from {sorted(GRAMMARS)}") from None


def grammar_for_model(config):
    """The registered grammar whose vocabulary and region size fit ``config``."""
    for g in GRAMMARS.values():
        if g.d_img == config.d_img and len(g.vocabulary()) == config.vocab_size:
            return g
    raise ValueError(
        f"no known grammar has d_img={config.d_img} and vocab_size={config.vocab_size}")


def role_lexicon(grammar=TOY_GRAMMAR):
    return get_grammar(grammar).role_lexicon()


def grammar_corpus(grammar=TOY_GRAMMAR):
    """One line per lexicon word, in lexicon order."""
    return get_grammar(grammar).corpus()


def grammar_vocabulary(grammar=TOY_GRAMMAR):
    return get_grammar(grammar).vocabulary()


@dataclass(frozen=True)
class LatentScene:
    """``entities`` are (noun, adjective or -1); ``relations`` are (rel, subj, obj)."""

    entities: tuple
    relations: tuple = ()

    def __post_init__(self):
        if not 1 <= len(self.entities) <= 3:
            raise ValueError("a scene has one to three entities")
        for _, a, b in self.relations:
            if not (0 <= a < len(self.entities) and 0 <= b < len(self.entities)):
                raise ValueError("relation index out of range")


@dataclass(eq=False)
class RegionImage:
    image_id: int
    regions: np.ndarray
    captions: tuple
    scene: LatentScene = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, RegionImage):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.regions.shape == other.regions.shape
            and np.array_equal(self.regions, other.regions)
            and tuple(c.text for c in self.captions) == tuple(c.text for c in other.captions)
        )


# ---------------------------------------------------------------- scenes and captions

def sample_scene(rng, grammar=TOY_GRAMMAR, adj_prob=0.8, rel_prob=0.7):
    g = get_grammar(grammar)
    n = int(rng.choice([1, 2, 3], p=[0.3, 0.4, 0.3]))
    nouns = rng.choice(len(g.nouns), size=n, replace=False)
    entities = tuple(
        (int(nn_), int(rng.integers(len(g.adjectives))) if rng.random() < adj_prob else -1)
        for nn_ in nouns
    )
    relations = tuple(
        (int(rng.integers(len(g.relations))), k, k + 1)
        for k in range(n - 1)
        if rng.random() < rel_prob
    )
    return LatentScene(entities, relations)


def realize(scene, order, dets, frame, grammar=TOY_GRAMMAR):
    """Surface words plus the gold scene graph of one realization.

    ``order`` permutes entities (only meaningful without relations), ``dets``
    gives one determiner per slot, ``frame`` is a leading stop-word phrase.
    """
    g = get_grammar(grammar)
    words = list(g.frames[frame])
    rel_after = {a: r for r, a, _ in scene.relations}
    objects, attributes, relations = [], [], []
    for slot, ent in enumerate(order):
        noun, adj = scene.entities[ent]
        if slot > 0:
            prev = order[slot - 1]
            if prev in rel_after:
                start = len(words)
                words.extend(g.relations[rel_after[prev]].split())
                relations.append(((start, len(words)), slot - 1, slot))
            else:
                words.append(g.conjunction)
        words.append(g.determiners[dets[slot]])
        if adj >= 0:
            attributes.append(((len(words), len(words) + 1), slot))
            words.append(g.adjectives[adj])
        objects.append((len(words), len(words) + 1))
        words.append(g.nouns[noun])
    graph = SceneGraph(tuple(objects), tuple(attributes), tuple(relations), len(words))
    return tuple(words), graph


def _orders(scene):
    n = len(scene.entities)
    if scene.relations:
        return [tuple(range(n))]
    return [tuple(p) for p in itertools.permutations(range(n))]


def sample_realizations(scene, rng, k=N_CAPTIONS, grammar=TOY_GRAMMAR):
    """``k`` distinct realizations (words, gold graph) of ``scene``."""
    g = get_grammar(grammar)
    n = len(scene.entities)
    orders = _orders(scene)
    seen, out = set(), []
    while len(out) < k:
        order = orders[int(rng.integers(len(orders)))]
        dets = tuple(int(d) for d in rng.integers(len(g.determiners), size=n))
        frame = int(rng.integers(len(g.frames)))
        words, graph = realize(scene, order, dets, frame, g)
        if words not in seen:
            seen.add(words)
            out.append((words, graph))
    return out


def scene_regions(scene, rng, grammar=TOY_GRAMMAR, n_regions=N_REGIONS, noise=NOISE):
    """Entity rows (noun + adjective one-hots), relation rows, zero padding."""
    g = get_grammar(grammar)
    n_n, n_a = len(g.nouns), len(g.adjectives)
    used = len(scene.entities) + len(scene.relations)
    if used > n_regions:
        raise ValueError(f"scene needs {used} regions, only {n_regions} available")
    regions = np.zeros((n_regions, g.d_img))
    for i, (noun, adj) in enumerate(scene.entities):
        regions[i, noun] = 1.0
        if adj >= 0:
            regions[i, n_n + adj] = 1.0
    for j, (rel, a, b) in enumerate(scene.relations):
        row = regions[len(scene.entities) + j]
        row[n_n + n_a + rel] = 1.0
        row[scene.entities[a][0]] += 0.5
        row[scene.entities[b][0]] += 0.5
    # padding rows stay exactly zero: noise there would fingerprint each image
    regions[:used] += rng.normal(0.0, noise, (used, g.d_img))
    return regions


def canonical_form(graph, words):
    """Order-free description of a parsed graph in surface terms."""
    adjs = {o: [] for o in range(len(graph.objects))}
    for (s, _), o in graph.attributes:
        adjs[o].append(words[s])
    objs = [(words[s], tuple(sorted(adjs[i]))) for i, (s, _) in enumerate(graph.objects)]
    rels = [
        (" ".join(words[s:e]), objs[a], objs[b]) for (s, e), a, b in graph.relations
    ]
    return tuple(sorted(objs)), tuple(sorted(rels))


def generate_dataset(n_images, seed=0, vocab=None, start_id=0, grammar=TOY_GRAMMAR):
    """``n_images`` scenes with five distinct captions each; pure in (n, seed)."""
    if n_images < 0:
        raise ValueError("n_images must be non-negative")
    g = get_grammar(grammar)
    vocab = vocab or g.vocabulary()
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n_images):
        scene = sample_scene(rng, g)
        caps = tuple(
            tokenize(vocab, " ".join(words)) for words, _ in sample_realizations(scene, rng, grammar=g)
        )
        images.append(RegionImage(start_id + i, scene_regions(scene, rng, g), caps, scene))
    return images


def caption_corpus(n_captions, seed=0, grammar=TOY_GRAMMAR):
    """Captions paired with their gold derivation graphs."""
    g = get_grammar(grammar)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_captions:
        scene = sample_scene(rng, g)
        out.extend(sample_realizations(scene, rng, k=1, grammar=g))
    return out[:n_captions]


# ---------------------------------------------------------------- JSONL

def write_jsonl(dataset, path):
    with open(path, "w") as fh:
        for im in dataset:
            rec = {
                "image_id": int(im.image_id),
                "regions": im.regions.tolist(),
                "captions": [c.text for c in im.captions],
            }
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path, vocab=None):
    """Load a dataset; malformed lines raise ``ValueError`` naming the line.

    ``vocab`` defaults to the toy grammar's vocabulary.
    """
    vocab = vocab or grammar_vocabulary()
    images = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                regions = np.array(rec["regions"], dtype=np.float64)
                captions = tuple(tokenize(vocab, c) for c in rec["captions"])
                image_id = int(rec["image_id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed line {lineno}: {exc}") from None
            if regions.ndim != 2:
                raise ValueError(f"{path}: malformed line {lineno}: regions must be 2-D")
            if any(len(c) > MAX_LEN for c in captions):
                raise ValueError(f"{path}: line {lineno}: caption exceeds {MAX_LEN} tokens")
            images.append(RegionImage(image_id, regions, captions))
    return images


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TAGS"
VERSION = 1


# Hyperparameters that shapes cannot reveal travel as 1-element entries.
META_PREFIX = "config."
META_FIELDS = ("n_heads", "n_regions")


def save_checkpoint(model, path):
    """Little-endian binary dump of every parameter, in model order.

    Head count and region count follow as ``config.*`` scalar entries.
    """
    entries = [(name, p.data) for name, p in model.params.items()]
    entries += [(META_PREFIX + f, np.array([float(getattr(model.config, f))]))
                for f in META_FIELDS]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, data in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``{name: array}`` in file order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(buf):
                raise ValueError("truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).copy()
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    return arrays


def load_checkpoint(path, n_heads=4, n_regions=N_REGIONS):
    """Rebuild a :class:`MatchModel`; dimensions are inferred from shapes.

    ``n_heads`` and ``n_regions`` are fallbacks for files without ``config.*`` entries.
    """
    from .model import MatchModel, ModelConfig
    from .nn import Param

    arrays = read_checkpoint(path)
    meta = {n[len(META_PREFIX):]: int(arrays.pop(n)[0]) for n in list(arrays)
            if n.startswith(META_PREFIX)}
    n_heads = meta.get("n_heads", n_heads)
    n_regions = meta.get("n_regions", n_regions)
    if "tok_emb" not in arrays or "reg_W" not in arrays:
        raise ValueError(f"{path}: checkpoint lacks embedding tables")
    V, d = arrays["tok_emb"].shape
    cfg = ModelConfig(
        vocab_size=V,
        d_img=arrays["reg_W"].shape[0],
        d=d,
        n_layers=sum(1 for n in arrays if n.endswith(".Wq")),
        n_heads=n_heads,
        n_regions=n_regions,
        max_len=arrays["pos_emb"].shape[0],
        d_ff=arrays["layer0.ff_W1"].shape[1] if "layer0.ff_W1" in arrays else 2 * d,
        pool="cls" if "cls_emb" in arrays else "mean",
    )
    return MatchModel(cfg, {n: Param(a, name=n) for n, a in arrays.items()})
