"""Loss terms, negative retrieval and the joint training step.

Single-pair loss functions (``irtm_loss``, ``mlm_loss`` ...) are written
as direct compositions of the model heads and are what the gradient checks
exercise. :func:`training_step` computes the same quantities for a whole
batch in one encoder pass.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .generator import (
    draw_candidates,
    keep_candidates,
    mask_caption,
    mine_top_m,
    mlm_logit_rows,
    score_pools,
    word_spans,
)
from .model import (
    MatchModel,
    ModelConfig,
    align_region_init,
    encode,
    forward,
    itm_head,
    itm_scores,
    mlm_head,
    pack,
    wod_head,
    woc_head,
)
from .scenegraph import parse_scene_graph


@dataclass(frozen=True)
class LossWeights:
    lambda_irtm: float = 1.0
    lambda_mlm: float = 0.1
    lambda_istm: float = 0.001
    lambda_wod: float = 0.1
    lambda_woc: float = 0.1
    alpha: float = 0.2

    def __post_init__(self):
        for name, v in vars(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def weight(self, term):
        return getattr(self, f"lambda_{term}")


TERMS = ("irtm", "mlm", "istm", "wod", "woc")


class GeneratorMode(enum.Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"


class NegativeStrategy(enum.Enum):
    RANDOM = "random"
    IN_BATCH_HARDEST = "hardest"


# ---------------------------------------------------------------- scalar losses

def triplet_loss(pos_score, neg_score, alpha):
    """Hinge ``max(alpha - pos + neg, 0)``; accepts floats or tensors."""
    if not isinstance(pos_score, nn.Tensor) and not isinstance(neg_score, nn.Tensor):
        return max(alpha - pos_score + neg_score, 0.0)
    diff = nn.add(nn.mul(pos_score, -1.0), neg_score)
    return nn.relu(nn.add(diff, alpha))


def _itm(model, image, caption):
    return nn.reshape(itm_head(model, encode(model, image, caption)), ())


def irtm_loss(model, image, caption, neg_image, neg_caption, alpha):
    pos = _itm(model, image, caption)
    text_term = triplet_loss(pos, _itm(model, image, neg_caption), alpha)
    image_term = triplet_loss(pos, _itm(model, neg_image, caption), alpha)
    return nn.add(text_term, image_term)


def istm_loss(model, image, caption, pool, alpha):
    items = list(pool)
    if not items:
        raise ValueError("empty negative pool; skip the term instead")
    pos = _itm(model, image, caption)
    terms = [triplet_loss(pos, _itm(model, image, it.caption), alpha) for it in items]
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return nn.mul(total, 1.0 / len(items))


def _token_logits(head, model, image, caption):
    js = encode(model, image, caption)
    return nn.index(head(model, js.token_states), (0, slice(0, len(caption))))


def mlm_loss(model, image, masked):
    pos = list(masked.positions)
    if not pos:
        raise ValueError("nothing to predict")
    probs = nn.softmax(_token_logits(mlm_head, model, image, masked), axis=-1)
    mask = np.zeros(len(masked), dtype=bool)
    mask[pos] = True
    return nn.nll(probs, masked.source.ids, mask)


def wod_loss(model, image, negative):
    probs = nn.softmax(_token_logits(wod_head, model, image, negative.caption), axis=-1)
    return nn.nll(probs, negative.gold_wod)


def woc_loss(model, image, negative, all_positions=False):
    n = len(negative.caption)
    if all_positions:
        mask = np.ones(n, dtype=bool)
    else:
        if not negative.replaced_positions:
            raise ValueError("negative has no replaced positions")
        mask = np.zeros(n, dtype=bool)
        mask[list(negative.replaced_positions)] = True
    probs = nn.softmax(_token_logits(woc_head, model, image, negative.caption), axis=-1)
    return nn.nll(probs, negative.source.ids, mask)


def total_loss(parts, weights):
    """Weighted sum of the five terms; absent parts and zero weights are skipped."""
    total = 0.0
    for term in TERMS:
        part = parts.get(term)
        w = weights.weight(term)
        if part is None or w == 0:
            continue
        total = nn.add(nn.mul(part, w), total) if isinstance(part, nn.Tensor) else total + w * part
    return total


# ---------------------------------------------------------------- retrieved negatives

def _other_rows(i, ids):
    return [j for j in range(len(ids)) if ids[j] != ids[i]]


def sample_retrieved_negatives(images, captions, model, strategy, rng):
    """One (negative image, negative caption) per pair, drawn from the other pairs."""
    if len(images) < 2:
        raise ValueError("retrieved negatives need a batch of at least 2")
    strategy = NegativeStrategy(strategy)
    ids = [getattr(im, "image_id", k) for k, im in enumerate(images)]
    out = []
    if strategy is NegativeStrategy.RANDOM:
        for i in range(len(images)):
            others = _other_rows(i, ids)
            if not others:
                raise ValueError("every pair in the batch shows the same image")
            j_img = others[int(rng.integers(len(others)))]
            j_cap = others[int(rng.integers(len(others)))]
            out.append((images[j_img], captions[j_cap]))
        return out
    B = len(images)
    grid_im = [images[a] for a in range(B) for _ in range(B)]
    grid_cap = [captions[b] for _ in range(B) for b in range(B)]
    scores = itm_scores(model, grid_im, grid_cap).reshape(B, B)  # [image, caption]
    for i in range(B):
        others = _other_rows(i, ids)
        if not others:
            raise ValueError("every pair in the batch shows the same image")
        j_cap = max(others, key=lambda j: (scores[i, j], -j))
        j_img = max(others, key=lambda j: (scores[j, i], -j))
        out.append((images[j_img], captions[j_cap]))
    return out


# ---------------------------------------------------------------- optimizer

@dataclass
class SGD:
    """Plain gradient descent with global gradient-norm clipping."""

    lr: float = 0.05
    clip: float = 5.0
    steps: int = 0

    def step(self, params):
        sq = sum(float((p.grad * p.grad).sum()) for p in params)
        norm = math.sqrt(sq)
        scale = self.lr
        if self.clip and norm > self.clip:
            scale *= self.clip / norm
        for p in params:
            p.data -= scale * p.grad
        self.steps += 1
        return norm


@dataclass
class Adam:
    """Adam with bias correction and global gradient-norm clipping."""

    lr: float = 1e-3
    clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, params):
        norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p in params:
            g = p.grad * scale
            m = self._m.get(p.name)
            if m is None:
                m = self._m[p.name] = np.zeros_like(p.data)
                self._v[p.name] = np.zeros_like(p.data)
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------- batched step

@dataclass
class TrainBatch:
    images: list
    captions: list
    graphs: list = None
    negatives: list = None
    pools: list = None

    def __post_init__(self):
        if len(self.images) != len(self.captions):
            raise ValueError("images and captions differ in length")


@dataclass
class StepReport:
    step: int
    parts: dict
    pool_sizes: list
    gaps: list
    loss: float
    grad_norm: float = 0.0

    @property
    def mean_pool_size(self):
        return float(np.mean(self.pool_sizes)) if self.pool_sizes else 0.0

    @property
    def mean_gap(self):
        return float(np.mean(self.gaps)) if self.gaps else float("nan")


@dataclass
class StepSettings:
    """Generation and masking knobs of one step."""

    K: int = 3
    L: int = 4
    m: int = 2
    tau: float = 1.0
    mask_ratio: float = 0.15
    masking: str = "scene_graph"
    negatives: str = "random"
    woc_all_positions: bool = False
    mode: GeneratorMode = GeneratorMode.DYNAMIC


def _weighted_pick(probs, rows, cols, weights):
    """``-sum_r w_r log probs[rows_r, cols_r]`` over a flattened [n, V] tensor."""
    picked = nn.index(probs, (np.asarray(rows), np.asarray(cols)))
    return nn.mul(nn.sum_(nn.mul(nn.log(picked), np.asarray(weights))), -1.0)


def mask_batch(captions, graphs, settings, rng):
    out = []
    for cap, graph in zip(captions, graphs):
        spans = word_spans(cap) if settings.masking == "word" else None
        out.append([
            mask_caption(cap, graph, settings.mask_ratio, rng, spans=spans)
            for _ in range(settings.K)
        ])
    return out


def generate_batch_pools(model, generator_model, images, captions, masked, settings, rng, vocab):
    """Refill every masking ``L`` times, filter, score with ``model``, mine top ``m``."""
    flat_im = [im for im, mk in zip(images, masked) for _ in mk]
    flat_mk = [m for mk in masked for m in mk]
    rows = mlm_logit_rows(generator_model, flat_im, flat_mk)
    logits, start = [], 0
    for mk in masked:
        logits.append(rows[start:start + len(mk)])
        start += len(mk)
    cands = draw_candidates(masked, logits, settings.L, settings.tau, rng, vocab)
    kept = [keep_candidates(c, im.captions) for c, im in zip(cands, images)]
    pools = score_pools(model, images, kept)
    return [mine_top_m(p, settings.m) for p in pools]


def batch_loss(model, batch, masked, weights, settings):
    """Weighted total loss for a prepared batch, plus per-term means."""
    B = len(batch.images)
    images, captions = batch.images, batch.captions
    seq_im, seq_cap = list(images), list(captions)
    seq_im += [im for im in images]
    seq_cap += [neg_cap for _, neg_cap in batch.negatives]
    seq_im += [neg_im for neg_im, _ in batch.negatives]
    seq_cap += list(captions)
    syn_owner, syn_items = [], []
    for i, pool in enumerate(batch.pools):
        for it in pool:
            syn_owner.append(i)
            syn_items.append(it)
    seq_im += [images[i] for i in syn_owner]
    seq_cap += [it.caption for it in syn_items]
    n_syn = len(syn_items)
    mlm_owner = [i for i, mk in enumerate(masked) for _ in mk]
    mlm_items = [m for mk in masked for m in mk]
    seq_im += [images[i] for i in mlm_owner]
    seq_cap += mlm_items
    n_itm = 3 * B + n_syn

    regions, ids, lengths = pack(model, seq_im, seq_cap)
    js = forward(model, regions, ids, lengths)
    s = itm_head(model, js)
    scores = s.data
    s_pos = nn.index(s, slice(0, B))
    s_negt = nn.index(s, slice(B, 2 * B))
    s_negi = nn.index(s, slice(2 * B, 3 * B))
    a = weights.alpha
    parts, means = {}, {}

    irtm_vec = nn.add(triplet_loss(s_pos, s_negt, a), triplet_loss(s_pos, s_negi, a))
    parts["irtm"] = nn.mul(nn.sum_(irtm_vec), 1.0 / B)
    means["irtm"] = float(irtm_vec.data.mean())

    T = ids.shape[1]
    tok = js.token_states
    if mlm_items:
        mlm_rows = np.arange(n_itm, n_itm + len(mlm_items))
        logits = mlm_head(model, nn.index(tok, mlm_rows))
        probs = nn.reshape(nn.softmax(logits, axis=-1), (len(mlm_items) * T, -1))
        r, c, w = [], [], []
        per_pair = np.zeros(B)
        for k, (owner, mk) in enumerate(zip(mlm_owner, mlm_items)):
            pos = mk.positions
            for p in pos:
                r.append(k * T + p)
                c.append(mk.source.ids[p])
                w.append(1.0 / (len(pos) * len(masked[owner]) * B))
        parts["mlm"] = _weighted_pick(probs, r, c, w)
        means["mlm"] = float(parts["mlm"].data)
    else:
        parts["mlm"] = None
        means["mlm"] = float("nan")

    has_pool = [len(p) > 0 for p in batch.pools]
    if n_syn:
        pool_len = np.array([len(batch.pools[i]) for i in syn_owner], dtype=float)
        s_syn = nn.index(s, slice(3 * B, 3 * B + n_syn))
        s_pos_syn = nn.index(s_pos, np.asarray(syn_owner))
        istm_vec = triplet_loss(s_pos_syn, s_syn, a)
        parts["istm"] = nn.sum_(nn.mul(istm_vec, 1.0 / (pool_len * B)))
        syn_rows = np.arange(3 * B, 3 * B + n_syn)
        syn_tok = nn.index(tok, syn_rows)
        wod_p = nn.reshape(nn.softmax(wod_head(model, syn_tok), axis=-1), (n_syn * T, 2))
        woc_p = nn.reshape(nn.softmax(woc_head(model, syn_tok), axis=-1), (n_syn * T, -1))
        rd, cd, wd, rc, cc, wc = [], [], [], [], [], []
        for k, (owner, it) in enumerate(zip(syn_owner, syn_items)):
            n = len(it.caption)
            base = 1.0 / (pool_len[k] * B)
            for p in range(n):
                rd.append(k * T + p)
                cd.append(it.gold_wod[p])
                wd.append(base / n)
            pos = range(n) if settings.woc_all_positions else it.replaced_positions
            for p in pos:
                rc.append(k * T + p)
                cc.append(it.source.ids[p])
                wc.append(base / len(pos))
        parts["wod"] = _weighted_pick(wod_p, rd, cd, wd)
        parts["woc"] = _weighted_pick(woc_p, rc, cc, wc)
        denom = B / sum(has_pool)
        for term in ("istm", "wod", "woc"):
            means[term] = float(parts[term].data) * denom
    else:
        for term in ("istm", "wod", "woc"):
            parts[term] = None
            means[term] = float("nan")

    loss = total_loss(parts, weights)
    gaps = [float(scores[3 * B + k] - scores[owner]) for k, owner in enumerate(syn_owner)]
    return loss, means, gaps


def training_step(model, batch, weights, settings, optimizer, rng, vocab,
                  generator_model=None, step=0):
    """One joint update over ``batch``; returns a :class:`StepReport`.

    Order of work: maskings, refills and filtering (with ``generator_model``
    in static mode, the live model otherwise), retrieved negatives, mining,
    then a single backward pass through the weighted sum of all terms.
    """
    mode = GeneratorMode(settings.mode)
    if mode is GeneratorMode.STATIC and generator_model is None:
        raise ValueError("static mode needs a frozen generator model")
    gen = model if mode is GeneratorMode.DYNAMIC else generator_model
    graphs = batch.graphs
    masked = mask_batch(batch.captions, graphs, settings, rng)
    if batch.pools is None:
        batch.pools = generate_batch_pools(
            model, gen, batch.images, batch.captions, masked, settings, rng, vocab
        )
    if batch.negatives is None:
        batch.negatives = sample_retrieved_negatives(
            batch.images, batch.captions, model, settings.negatives, rng
        )
    if weights.lambda_mlm == 0:
        masked = [[] for _ in masked]
    model.zero_grad()
    loss, means, gaps = batch_loss(model, batch, masked, weights, settings)
    norm = 0.0
    if isinstance(loss, nn.Tensor) and loss.requires_grad:
        nn.backward(loss)
        norm = optimizer.step(model.parameters())
    return StepReport(
        step=step,
        parts=means,
        pool_sizes=[len(p) for p in batch.pools],
        gaps=gaps,
        loss=float(loss.data) if isinstance(loss, nn.Tensor) else float(loss),
        grad_norm=norm,
    )


# ---------------------------------------------------------------- loop

OPTIMIZERS = {"sgd": SGD, "adam": Adam}
CSV_COLUMNS = ("step", "l_irtm", "l_mlm", "l_istm", "l_wod", "l_woc", "mean_pool_size", "mean_gap")


def make_optimizer(name, lr, clip=5.0):
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(lr=lr, clip=clip)


def build_model(vocab, grammar, seed=0, d=64, n_layers=2, n_heads=4, n_regions=8,
                d_ff=128, max_len=24, tie_init=True, pool="cls"):
    """Fresh matcher sized for ``grammar``; optionally region rows tied to word embeddings."""
    cfg = ModelConfig(
        vocab_size=len(vocab), d_img=grammar.d_img, d=d, n_layers=n_layers,
        n_heads=n_heads, n_regions=n_regions, max_len=max_len, d_ff=d_ff, pool=pool,
    )
    model = MatchModel.init(cfg, seed)
    if tie_init:
        align_region_init(model, vocab, grammar.concept_words())
    return model


def caption_graphs(dataset, lexicon):
    return {c.ids: parse_scene_graph(c, lexicon) for im in dataset for c in im.captions}


def sample_batch(dataset, batch_size, rng, graphs):
    idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
    images = [dataset[i] for i in idx]
    captions = [im.captions[int(rng.integers(len(im.captions)))] for im in images]
    return TrainBatch(images, captions, [graphs[c.ids] for c in captions])


def warmup_generator(model, dataset, steps, settings, optimizer, rng, vocab, graphs, batch_size):
    """MLM-only updates (used to pre-train the frozen generator)."""
    weights = LossWeights(0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    for _ in range(steps):
        batch = sample_batch(dataset, batch_size, rng, graphs)
        masked = mask_batch(batch.captions, batch.graphs, settings, rng)
        batch.pools = [[] for _ in batch.images]
        batch.negatives = [(im, c) for im, c in zip(batch.images, batch.captions)]
        model.zero_grad()
        loss, _, _ = batch_loss(model, batch, masked, weights, settings)
        nn.backward(loss)
        optimizer.step(model.parameters())
    return model


def static_generator(model, dataset, steps, settings, optimizer, rng, vocab, graphs, batch_size):
    """A frozen MLM: a copy of ``model`` warmed up on MLM alone, ``model`` untouched."""
    gen = model.copy()
    warmup_generator(gen, dataset, steps, settings, optimizer, rng, vocab, graphs, batch_size)
    for p in gen.parameters():
        p.requires_grad = False
    return gen


def train(model, dataset, steps, weights, settings, optimizer, rng, vocab, graphs,
          batch_size=8, generator_model=None, callback=None, batch_rng=None):
    """Run ``steps`` joint updates on random batches; returns the step reports.

    ``batch_rng`` (default: ``rng``) drives batch sampling and retrieved
    negatives, ``rng`` drives masking and refilling. Keeping them apart lets
    variants that differ only in generation see the same batches.
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least two images")
    batch_rng = rng if batch_rng is None else batch_rng
    reports = []
    for step in range(steps):
        batch = sample_batch(dataset, batch_size, batch_rng, graphs)
        batch.negatives = sample_retrieved_negatives(
            batch.images, batch.captions, model, settings.negatives, batch_rng)
        report = training_step(model, batch, weights, settings, optimizer, rng, vocab,
                               generator_model=generator_model, step=step)
        reports.append(report)
        if callback is not None:
            callback(report)
    return reports


def _fmt(v):
    return repr(float(v))


def report_row(report):
    p = report.parts
    return [str(report.step)] + [_fmt(p.get(t, float("nan"))) for t in TERMS] + [
        _fmt(report.mean_pool_size), _fmt(report.mean_gap)]


def write_metrics_csv(reports, path, append=False):
    """Step reports as CSV; floats use ``repr`` so identical runs give identical bytes."""
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(report_row(r))
