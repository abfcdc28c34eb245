"""Synthetic hard negatives by masking and model-driven refilling.

A positive caption is masked on scene-graph spans, every masked position
is refilled by sampling from the temperature-scaled MLM distribution, and
candidates whose replacements all occur in the image's own annotations
are dropped as likely false negatives. The survivors are scored with the
matching head and the top ``m`` become the image's negative pool.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .model import MASK_ID, forward, itm_scores, mlm_head, pack
from .scenegraph import mask_candidates
from .text import RESERVED, TokenSeq

RESERVED_IDS = tuple(range(len(RESERVED)))


@dataclass(frozen=True)
class MaskedCaption:
    ids: tuple
    masked_spans: tuple
    source: TokenSeq

    def __len__(self):
        return len(self.ids)

    @property
    def positions(self):
        return tuple(p for s, e in self.masked_spans for p in range(s, e))


@dataclass
class SyntheticNegative:
    caption: TokenSeq
    source: TokenSeq
    replaced_positions: tuple
    gold_wod: tuple
    itm: float = None
    order: int = 0

    @property
    def text(self):
        return self.caption.text


@dataclass
class NegativePool:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def scores(self):
        return [it.itm for it in self.items]


# ---------------------------------------------------------------- masking

def word_spans(caption):
    """Every token as its own span (plain word masking)."""
    return tuple((i, i + 1) for i in range(len(caption)))


def mask_caption(caption, graph, ratio=0.15, rng=None, spans=None):
    """Mask whole candidate spans in random order until ``ceil(ratio*len)`` tokens are covered.

    ``spans`` overrides the scene-graph candidates (used for word masking).
    At least one span is always masked.
    """
    rng = np.random.default_rng() if rng is None else rng
    if spans is None:
        spans = mask_candidates(graph, caption).spans
    spans = tuple(spans)
    if not spans:
        raise ValueError("unmaskable caption")
    target = max(1, math.ceil(ratio * len(caption)))
    chosen, covered = [], 0
    for k in rng.permutation(len(spans)):
        if covered >= target:
            break
        s, e = spans[k]
        chosen.append((s, e))
        covered += e - s
    chosen.sort()
    ids = list(caption.ids)
    for s, e in chosen:
        ids[s:e] = [MASK_ID] * (e - s)
    return MaskedCaption(tuple(ids), tuple(chosen), caption)


# ---------------------------------------------------------------- refilling

def sampling_probs(logit_rows, tau, exclude=RESERVED_IDS):
    """Softmax at temperature ``tau`` with ``exclude`` ids removed from the support."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.array(logit_rows, dtype=np.float64, copy=True)
    z[..., list(exclude)] = -np.inf
    return nn.softmax_t(nn.Tensor(z), tau).data


def sample_rows(probs, rng):
    """One categorical draw per row by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=-1), probs.shape[1] - 1)


def refill_from_logits(masked, logits, tau, rng, vocab, order=0):
    """Sample every masked position of ``masked`` from its ``logits`` row at once."""
    pos = list(masked.positions)
    draws = sample_rows(sampling_probs(np.asarray(logits)[pos], tau), rng)
    src = masked.source
    caption = src.replace(pos, draws, vocab)
    replaced = tuple(p for p, t in zip(pos, draws) if int(t) != src.ids[p])
    gold = tuple(int(a == b) for a, b in zip(caption.ids, src.ids))
    return SyntheticNegative(caption, src, replaced, gold, order=order)


def mlm_logit_rows(model, images, masked_list):
    """Per-caption [len, V] MLM logits for a list of masked captions."""
    with nn.no_grad():
        packed = pack(model, images, masked_list)
        logits = mlm_head(model, forward(model, *packed).token_states).data
    return [logits[i, : len(m)] for i, m in enumerate(masked_list)]


def refill(model, image, masked, tau, rng, vocab):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    (logits,) = mlm_logit_rows(model, [image], [masked])
    return refill_from_logits(masked, logits, tau, rng, vocab)


# ---------------------------------------------------------------- filtering and mining

def is_false_negative(candidate, annotations):
    """True when every replaced surface word occurs in some annotation."""
    pool = {w for ann in annotations for w in ann.surfaces}
    words = candidate.caption.surfaces
    return all(words[p] in pool for p in candidate.replaced_positions)


def keep_candidates(candidates, annotations):
    """Drop identity draws, false negatives and duplicate captions (first kept)."""
    kept, seen = [], set()
    for cand in candidates:
        if cand.caption.ids == cand.source.ids or is_false_negative(cand, annotations):
            continue
        if cand.caption.ids in seen:
            continue
        seen.add(cand.caption.ids)
        kept.append(cand)
    return kept


def mine_top_m(pool, m):
    """The ``m`` highest-scoring items, ties resolved by generation order."""
    if m < 1:
        raise ValueError("m must be >= 1")
    ranked = sorted(pool.items, key=lambda it: (-it.itm, it.order))
    return NegativePool(ranked[:m])


# ---------------------------------------------------------------- pools

def draw_candidates(masked_lists, logits_lists, L, tau, rng, vocab):
    """``L`` refills per masking, k-major; returns one candidate list per caption."""
    out = []
    for masked, logits in zip(masked_lists, logits_lists):
        cands, order = [], 0
        for mk, lg in zip(masked, logits):
            for _ in range(L):
                cands.append(refill_from_logits(mk, lg, tau, rng, vocab, order=order))
                order += 1
        out.append(cands)
    return out


def score_pools(model, images, kept_lists):
    """Cache matching scores on every kept candidate (one batched pass)."""
    flat_im, flat_cap, flat_items = [], [], []
    for im, kept in zip(images, kept_lists):
        for cand in kept:
            flat_im.append(im)
            flat_cap.append(cand.caption)
            flat_items.append(cand)
    if flat_items:
        for cand, s in zip(flat_items, itm_scores(model, flat_im, flat_cap)):
            cand.itm = float(s)
    return [NegativePool(kept) for kept in kept_lists]


def generate_pool(model, image, caption, graph, K, L, tau, rng, vocab,
                  scorer=None, annotations=None, ratio=0.15, spans=None):
    """Unmined candidate pool for one positive pair.

    ``model`` refills; ``scorer`` (default ``model``) supplies matching
    scores. All K maskings are drawn before any refill.
    """
    if K < 1 or L < 1:
        raise ValueError("K and L must be >= 1")
    scorer = model if scorer is None else scorer
    annotations = image.captions if annotations is None else annotations
    masked = [mask_caption(caption, graph, ratio, rng, spans=spans) for _ in range(K)]
    logits = mlm_logit_rows(model, [image] * K, masked)
    (cands,) = draw_candidates([masked], [logits], L, tau, rng, vocab)
    (pool,) = score_pools(scorer, [image], [keep_candidates(cands, annotations)])
    return pool
