"""Cross-modal transformer backbone with ITM, MLM, WoD and WoC heads.

Regions and caption tokens are concatenated into one sequence and encoded
by a small pre-norm transformer. Regions carry no position embedding, so
the encoder is equivariant (and the mean-pooled ITM score invariant) under
region permutations. All heads read the same final hidden states.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Param, Tensor
from .text import MASK, RESERVED

MASK_ID = RESERVED.index(MASK)

_NEG = -1e30
POOLING = ("mean", "cls")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_img: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_regions: int = 8
    max_len: int = 24
    d_ff: int = 128
    pool: str = "cls"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.pool not in POOLING:
            raise ValueError(f"pool must be one of {POOLING}, got {self.pool!r}")

    @property
    def n_prefix(self):
        """Positions before the first token: an optional summary slot, then regions."""
        return self.n_regions + (self.pool == "cls")


BACKBONE_PREFIXES = ("tok_emb", "pos_emb", "reg_", "cls_", "layer", "ln_f")
HEAD_PREFIXES = {"itm": "itm_", "mlm": "mlm_", "wod": "wod_", "woc": "woc_"}


def _param_shapes(cfg):
    d, V = cfg.d, cfg.vocab_size
    shapes = {
        "tok_emb": (V, d),
        "pos_emb": (cfg.max_len, d),
        "reg_W": (cfg.d_img, d),
        "reg_b": (d,),
    }
    if cfg.pool == "cls":
        shapes["cls_emb"] = (1, d)
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "Wq": (d, d), p + "bq": (d,),
            p + "Wk": (d, d), p + "bk": (d,),
            p + "Wv": (d, d), p + "bv": (d,),
            p + "Wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "ff_W1": (d, cfg.d_ff), p + "ff_b1": (cfg.d_ff,),
            p + "ff_W2": (cfg.d_ff, d), p + "ff_b2": (d,),
        })
    shapes.update({
        "ln_f_g": (d,), "ln_f_b": (d,),
        "itm_W": (d, 1), "itm_b": (1,),
        "mlm_W1": (d, d), "mlm_b1": (d,), "mlm_W2": (d, V), "mlm_b2": (V,),
        "wod_W": (d, 2), "wod_b": (2,),
        "woc_W1": (d, d), "woc_b1": (d,), "woc_W2": (d, V), "woc_b2": (V,),
    })
    return shapes


def _init_value(name, shape, rng):
    leaf = name.split(".")[-1]
    if leaf.endswith("_g"):
        return np.ones(shape)
    # all-zero padding regions project onto reg_b, so it acts as an "empty
    # region" embedding; a zero start would sit on LayerNorm/ReLU kinks
    if name in ("tok_emb", "pos_emb", "reg_b", "cls_emb"):
        return rng.normal(0.0, 1.0, shape)
    if len(shape) == 1:
        return np.zeros(shape)
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)


class MatchModel:
    """Parameter container; forward passes live in module-level functions."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        params = {
            name: Param(_init_value(name, shape, rng), name=name)
            for name, shape in _param_shapes(config).items()
        }
        return cls(config, params)

    @classmethod
    def zeros(cls, config):
        params = {n: Param(np.zeros(s), name=n) for n, s in _param_shapes(config).items()}
        return cls(config, params)

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self):
        params = {n: Param(p.data.copy(), name=n) for n, p in self.params.items()}
        return MatchModel(self.config, params)

    def state(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, v in state.items():
            self.params[n].data[...] = v

    def backbone_params(self):
        return [p for n, p in self.params.items() if n.startswith(BACKBONE_PREFIXES)]

    def head_params(self, head):
        prefix = HEAD_PREFIXES[head]
        return [p for n, p in self.params.items() if n.startswith(prefix)]


def align_region_init(model, vocab, concept_words):
    """Start region-projection row ``k`` at the embedding of ``concept_words[k]``.

    Only the initial values are tied; the two tables train independently.
    """
    W = model["reg_W"].data
    if len(concept_words) != W.shape[0]:
        raise ValueError(f"{len(concept_words)} concept words for d_img={W.shape[0]}")
    for k, word in enumerate(concept_words):
        W[k] = model["tok_emb"].data[vocab.id_of(word)]
    return model


@dataclass
class JointStates:
    """Backbone outputs for a batch: ``states`` is [N, P + T, d].

    The ``P = n_prefix`` leading positions are the summary slot (when the
    model pools through one) followed by the regions.
    """

    states: Tensor
    n_prefix: int
    lengths: np.ndarray

    @property
    def valid(self):
        n, s = self.states.shape[:2]
        pos = np.arange(s - self.n_prefix)
        tok = pos[None, :] < self.lengths[:, None]
        return np.concatenate([np.ones((n, self.n_prefix), bool), tok], axis=1)

    @property
    def token_states(self):
        return nn.index(self.states, (slice(None), slice(self.n_prefix, None)))

    def token_count(self, i=0):
        return int(self.lengths[i])


# ---------------------------------------------------------------- batching

def _ids(caption):
    return caption.ids if hasattr(caption, "ids") else tuple(caption)


def _regions(image):
    return image.regions if hasattr(image, "regions") else np.asarray(image)


def pack(model, images, captions):
    """Stack region matrices and right-pad token ids for a batch."""
    cfg = model.config
    regions = np.stack([_regions(im) for im in images]).astype(np.float64)
    if regions.shape[1:] != (cfg.n_regions, cfg.d_img):
        raise ValueError(
            f"expected regions of shape {(cfg.n_regions, cfg.d_img)}, got {regions.shape[1:]}"
        )
    seqs = [_ids(c) for c in captions]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.size and lengths.max() > cfg.max_len:
        raise ValueError(f"caption longer than max_len={cfg.max_len}")
    T = max(int(lengths.max()) if lengths.size else 0, 1)
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return regions, ids, lengths


# ---------------------------------------------------------------- backbone

def _attention(model, p, h, key_mask):
    cfg = model.config
    N, S, d = h.shape
    H = cfg.n_heads
    dh = d // H

    def heads(W, b):
        x = nn.affine(h, model[p + W], model[p + b])
        return nn.transpose(nn.reshape(x, (N, S, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("Wq", "bq"), heads("Wk", "bk"), heads("Wv", "bv")
    scores = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = nn.softmax(scores, axis=-1, additive_mask=key_mask)
    ctx = nn.reshape(nn.transpose(nn.matmul(att, v), (0, 2, 1, 3)), (N, S, d))
    return nn.affine(ctx, model[p + "Wo"], model[p + "bo"])


def forward(model, regions, ids, lengths):
    """Run the backbone on a packed batch and return :class:`JointStates`."""
    cfg = model.config
    N, T = ids.shape
    x_reg = nn.affine(regions, model["reg_W"], model["reg_b"])
    pos = nn.index(model["pos_emb"], slice(0, T))
    x_tok = nn.add(nn.take_rows(model["tok_emb"], ids), pos)
    parts = [x_reg, x_tok]
    if cfg.pool == "cls":
        parts.insert(0, nn.take_rows(model["cls_emb"], np.zeros((N, 1), dtype=np.int64)))
    x = nn.concat(parts, axis=1)
    tok_valid = np.arange(T)[None, :] < lengths[:, None]
    valid = np.concatenate([np.ones((N, cfg.n_prefix), bool), tok_valid], axis=1)
    key_mask = np.where(valid, 0.0, _NEG)[:, None, None, :]
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        h = nn.layer_norm(x, model[p + "ln1_g"], model[p + "ln1_b"])
        x = nn.add(x, _attention(model, p, h, key_mask))
        h = nn.layer_norm(x, model[p + "ln2_g"], model[p + "ln2_b"])
        ff = nn.relu(nn.affine(h, model[p + "ff_W1"], model[p + "ff_b1"]))
        x = nn.add(x, nn.affine(ff, model[p + "ff_W2"], model[p + "ff_b2"]))
    x = nn.layer_norm(x, model["ln_f_g"], model["ln_f_b"])
    return JointStates(x, cfg.n_prefix, lengths)


# ---------------------------------------------------------------- heads

def itm_head(model, js):
    """Matching probability per pair from the pooled state: [N].

    ``pool="mean"`` averages every valid position; ``pool="cls"`` reads the
    summary slot, which attends to regions and tokens like any other position.
    """
    if model.config.pool == "cls":
        pooled = nn.index(js.states, (slice(None), 0))
    else:
        valid = js.valid.astype(np.float64)
        weights = valid / valid.sum(axis=1, keepdims=True)
        pooled = nn.sum_(nn.mul(js.states, weights[:, :, None]), axis=1)
    logit = nn.affine(pooled, model["itm_W"], model["itm_b"])
    return nn.reshape(nn.sigmoid(logit), (logit.shape[0],))


def _two_layer(model, prefix, h):
    hidden = nn.relu(nn.affine(h, model[prefix + "W1"], model[prefix + "b1"]))
    return nn.affine(hidden, model[prefix + "W2"], model[prefix + "b2"])


def mlm_head(model, tokens):
    """Vocabulary logits [N, T, V] from token states [N, T, d]."""
    return _two_layer(model, "mlm_", tokens)


def woc_head(model, tokens):
    return _two_layer(model, "woc_", tokens)


def wod_head(model, tokens):
    """Per-token logits for (mismatched, matched): [N, T, 2]."""
    return nn.affine(tokens, model["wod_W"], model["wod_b"])


# ---------------------------------------------------------------- single-pair API

def encode(model, image, caption):
    regions, ids, lengths = pack(model, [image], [caption])
    return forward(model, regions, ids, lengths)


def itm_score(model, image, caption):
    with nn.no_grad():
        return float(itm_head(model, encode(model, image, caption)).data[0])


def itm_scores(model, images, captions, batch_size=256):
    """Matching scores for aligned lists of images and captions."""
    out = np.empty(len(captions))
    with nn.no_grad():
        for start in range(0, len(captions), batch_size):
            sl = slice(start, start + batch_size)
            packed = pack(model, images[sl], captions[sl])
            out[sl] = itm_head(model, forward(model, *packed)).data
    return out


def _token_rows(head_fn, model, image, caption):
    js = encode(model, image, caption)
    n = len(_ids(caption))
    return nn.index(head_fn(model, js.token_states), (0, slice(0, n)))


def mlm_logits(model, image, masked_caption):
    if MASK_ID not in _ids(masked_caption):
        raise ValueError("nothing to predict")
    return _token_rows(mlm_head, model, image, masked_caption)


def woc_logits(model, image, caption):
    return _token_rows(woc_head, model, image, caption)


def wod_probs(model, image, caption):
    """Per-token two-way distribution; column 1 is P(word matches image)."""
    with nn.no_grad():
        logits = _token_rows(wod_head, model, image, caption)
        return nn.softmax(logits, axis=-1).data
