"""Retrieval recall, negative discrimination, word-task accuracy and difficulty gaps."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .generator import RESERVED_IDS, generate_pool, mine_top_m
from .model import itm_scores, wod_probs, woc_logits

KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    i2t: dict
    t2i: dict

    @property
    def rsum(self):
        return 100.0 * (sum(self.i2t.values()) + sum(self.t2i.values()))

    @property
    def r_at(self):
        return {"i2t": dict(self.i2t), "t2i": dict(self.t2i)}

    def rows(self):
        for direction, table in (("i2t", self.i2t), ("t2i", self.t2i)):
            for k, v in sorted(table.items()):
                yield direction, k, v


def _scorer(model):
    if callable(model):
        return model
    return lambda images, captions: itm_scores(model, images, captions)


def score_matrix(model, images, captions):
    """Scores of every (image, caption) combination: [n_images, n_captions]."""
    score = _scorer(model)
    grid_im = [im for im in images for _ in captions]
    grid_cap = [c for _ in images for c in captions]
    return np.asarray(score(grid_im, grid_cap), dtype=np.float64).reshape(len(images), len(captions))


def best_gold_ranks(scores, gold):
    """1-based rank of the best gold column per row; ties go to the lower index."""
    ranks = []
    for row, golds in zip(scores, gold):
        order = np.argsort(-row, kind="stable")
        pos = np.empty_like(order)
        pos[order] = np.arange(1, len(order) + 1)
        ranks.append(int(min(pos[g] for g in golds)))
    return np.array(ranks)


def recall_from_ranks(ranks, ks=KS):
    ranks = np.asarray(ranks)
    return {k: float(np.mean(ranks <= k)) for k in ks}


def recall_at_k(model, images, ks=KS):
    """Image-to-text and text-to-image recall over a gallery of annotated images.

    ``model`` is a :class:`MatchModel` or any ``f(images, captions) -> scores``.
    """
    if not images:
        raise ValueError("empty gallery")
    captions, owner = [], []
    for i, im in enumerate(images):
        for c in im.captions:
            captions.append(c)
            owner.append(i)
    S = score_matrix(model, images, captions)
    owner = np.array(owner)
    i2t_gold = [np.flatnonzero(owner == i) for i in range(len(images))]
    t2i_gold = [[o] for o in owner]
    return RetrievalReport(
        recall_from_ranks(best_gold_ranks(S, i2t_gold), ks),
        recall_from_ranks(best_gold_ranks(S.T, t2i_gold), ks),
    )


def random_recall_baseline(n_candidates, n_gold, k):
    """Chance that a uniformly random ranking puts a gold item in the top ``k``."""
    k = min(k, n_candidates)
    miss = 1.0
    for j in range(k):
        miss *= (n_candidates - n_gold - j) / (n_candidates - j)
    return 1.0 - max(miss, 0.0)


def discrimination_accuracy(model, triples):
    """Fraction of (image, positive, negative) triples scored strictly in order."""
    triples = list(triples)
    if not triples:
        return float("nan")
    score = _scorer(model)
    ims = [t[0] for t in triples]
    pos = np.asarray(score(ims, [t[1] for t in triples]))
    neg = np.asarray(score(ims, [t[2] for t in triples]))
    return float(np.mean(pos > neg))


def wod_accuracy(model, negatives):
    """Per-token accuracy of thresholding P(matched) at 0.5 against gold labels."""
    hit = total = 0
    for image, neg in negatives:
        pred = wod_probs(model, image, neg.caption)[:, 1] >= 0.5
        gold = np.asarray(neg.gold_wod, dtype=bool)
        hit += int((pred == gold).sum())
        total += gold.size
    return hit / total if total else float("nan")


def woc_accuracy(model, negatives):
    """Share of replaced positions whose corrected word is the original one.

    Reserved ids are excluded from the argmax; ties go to the lowest id.
    """
    hit = total = 0
    for image, neg in negatives:
        pos = list(neg.replaced_positions)
        if not pos:
            continue
        logits = woc_logits(model, image, neg.caption).data[pos].copy()
        logits[:, list(RESERVED_IDS)] = -np.inf
        pred = logits.argmax(axis=1)
        hit += int(sum(int(p) == neg.source.ids[q] for p, q in zip(pred, pos)))
        total += len(pos)
    return hit / total if total else float("nan")


# ---------------------------------------------------------------- difficulty gaps

class GapStrategy(enum.Enum):
    IN_BATCH = "inbatch"
    DATASET_WIDE = "dataset"
    GENERATED = "generated"


BIN_WIDTH = 0.05
# rounded so that edges equal their decimal literals (0.05, not 0.05000000000000004)
BIN_EDGES = np.round(np.linspace(-1.0, 1.0, int(round(2.0 / BIN_WIDTH)) + 1), 12)


@dataclass
class GapHistogram:
    values: list = field(default_factory=list)

    @property
    def bin_left(self):
        return BIN_EDGES[:-1]

    @property
    def counts(self):
        clipped = np.clip(np.asarray(self.values, dtype=float), -1.0, 1.0)
        return np.histogram(clipped, bins=BIN_EDGES)[0]

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values else float("nan")

    def fraction_above(self, threshold):
        v = np.asarray(self.values)
        return float(np.mean(v > threshold)) if v.size else float("nan")


def difficulty_gap(model, images, strategy, batch_size=8, rng=None, vocab=None,
                   graphs=None, K=3, L=4, tau=1.0):
    """Gap ``ITM(image, hardest negative) - ITM(image, first caption)`` per image.

    Generated negatives need ``vocab`` and ``graphs`` (caption ids -> SceneGraph);
    images whose generated pool is empty are skipped.
    """
    strategy = GapStrategy(strategy)
    pos_caps = [im.captions[0] for im in images]
    pos = itm_scores(model, images, pos_caps)
    hist = GapHistogram()
    if strategy is GapStrategy.GENERATED:
        rng = np.random.default_rng(0) if rng is None else rng
        for im, cap, p in zip(images, pos_caps, pos):
            pool = generate_pool(model, im, cap, graphs[cap.ids], K, L, tau, rng, vocab)
            if len(pool):
                hist.values.append(mine_top_m(pool, 1)[0].itm - float(p))
        return hist
    if strategy is GapStrategy.DATASET_WIDE:
        groups = [list(range(len(images)))]
    else:
        groups = [list(range(s, min(s + batch_size, len(images))))
                  for s in range(0, len(images), batch_size)]
    for group in groups:
        cands = [(j, c) for j in group for c in images[j].captions]
        S = score_matrix(model, [images[i] for i in group], [c for _, c in cands])
        for row, i in enumerate(group):
            other = [col for col, (j, _) in enumerate(cands) if images[j].image_id != images[i].image_id]
            if other:
                hist.values.append(float(S[row, other].max() - pos[i]))
    return hist
