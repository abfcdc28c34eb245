"""Rule-based scene-graph parsing of short captions.

Parsing is driven by a role lexicon mapping each word to one of NOUN, ADJ,
VERB, PREP, DET or STOP and follows the caption pattern

    DET? ADJ* NOUN ((VERB|PREP)+ DET? ADJ* NOUN | STOP DET? ADJ* NOUN)*

Words missing from the lexicon are left unlabeled and never masked.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

ROLES = ("NOUN", "ADJ", "VERB", "PREP", "DET", "STOP")
_RELATION_ROLES = ("VERB", "PREP")


@dataclass(frozen=True)
class SceneGraph:
    """Objects, attributes and relations as half-open ``(start, end)`` token spans.

    ``attributes`` holds ``(span, object_index)`` and ``relations`` holds
    ``(span, subject_index, object_index)``.
    """

    objects: tuple = ()
    attributes: tuple = ()
    relations: tuple = ()
    length: int = 0

    def element_spans(self):
        spans = list(self.objects)
        spans += [s for s, _ in self.attributes]
        spans += [s for s, _, _ in self.relations]
        return spans

    def validate(self):
        spans = sorted(self.element_spans())
        for start, end in spans:
            if not 0 <= start < end <= self.length:
                raise ValueError(f"span {(start, end)} out of bounds")
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError("overlapping scene-graph spans")
        n = len(self.objects)
        for _, o in self.attributes:
            if not 0 <= o < n:
                raise ValueError("attribute references missing object")
        for _, a, b in self.relations:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError("relation references missing object")
        return self


@dataclass(frozen=True)
class MaskCandidateSet:
    spans: tuple
    source: object = None

    def __len__(self):
        return len(self.spans)

    @property
    def positions(self):
        return sorted({p for s, e in self.spans for p in range(s, e)})


def load_lexicon(path=None):
    """Read ``word<TAB>role`` lines; the bundled lexicon (covers every grammar) by default."""
    if path is None:
        text = resources.files("tagsdc").joinpath("data/lexicon.tsv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    lexicon = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            word, role = line.split("\t")
        except ValueError:
            raise ValueError(f"lexicon line {lineno}: expected word<TAB>role") from None
        role = role.strip()
        if role not in ROLES:
            raise ValueError(f"lexicon line {lineno}: unknown role {role!r}")
        lexicon[word.strip().lower()] = role
    return lexicon


def save_lexicon(lexicon, path):
    with open(path, "w") as fh:
        for word, role in lexicon.items():
            fh.write(f"{word}\t{role}\n")


def _surfaces(caption):
    return caption.surfaces if hasattr(caption, "surfaces") else tuple(caption)


def parse_scene_graph(caption, lexicon):
    """Parse a caption (TokenSeq or word sequence) into a :class:`SceneGraph`."""
    words = _surfaces(caption)
    roles = [lexicon.get(w) for w in words]
    objects, attributes, relations = [], [], []
    pending_adj = []
    pending_rel = None  # (span, subject index)
    i = 0
    while i < len(words):
        role = roles[i]
        if role == "ADJ":
            pending_adj.append((i, i + 1))
        elif role == "NOUN":
            idx = len(objects)
            objects.append((i, i + 1))
            attributes.extend((span, idx) for span in pending_adj)
            pending_adj = []
            if pending_rel is not None:
                relations.append((pending_rel[0], pending_rel[1], idx))
                pending_rel = None
        elif role in _RELATION_ROLES:
            j = i
            while j < len(words) and roles[j] in _RELATION_ROLES:
                j += 1
            pending_adj = []
            pending_rel = ((i, j), len(objects) - 1) if objects else None
            i = j
            continue
        elif role == "STOP":
            pending_rel = None
            pending_adj = []
        i += 1
    return SceneGraph(tuple(objects), tuple(attributes), tuple(relations), len(words))


def mask_candidates(graph, source=None):
    """Every object, attribute and relation span, in caption order."""
    return MaskCandidateSet(tuple(sorted(graph.element_spans())), source)
