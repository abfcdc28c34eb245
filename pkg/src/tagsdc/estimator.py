"""Scikit-learn style wrapper around the joint matcher.

``X`` is a list of :class:`~tagsdc.datagen.RegionImage` (a gallery of images
with their captions); there is no target, the captions are the supervision.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_random_state

from .datagen import RegionImage, get_grammar
from .evaluation import recall_at_k
from .model import itm_scores
from .scenegraph import load_lexicon
from .training import (
    GeneratorMode,
    LossWeights,
    StepSettings,
    build_model,
    caption_graphs,
    make_optimizer,
    static_generator,
    train,
)


def check_gallery(X, n_regions=None, d_img=None, min_images=1):
    """Validate a list of annotated region images and return it as a list."""
    if isinstance(X, RegionImage):
        raise TypeError("expected a sequence of RegionImage, got a single image")
    X = list(X)
    if len(X) < min_images:
        raise ValueError(f"need at least {min_images} images, got {len(X)}")
    for k, im in enumerate(X):
        if not isinstance(im, RegionImage):
            raise TypeError(f"item {k} is {type(im).__name__}, not RegionImage")
        r = np.asarray(im.regions)
        if r.ndim != 2 or not np.all(np.isfinite(r)):
            raise ValueError(f"image {im.image_id}: regions must be a finite 2-D array")
        if n_regions is not None and r.shape[0] != n_regions:
            raise ValueError(f"image {im.image_id}: {r.shape[0]} regions, expected {n_regions}")
        if d_img is not None and r.shape[1] != d_img:
            raise ValueError(f"image {im.image_id}: region dim {r.shape[1]}, expected {d_img}")
        if not im.captions:
            raise ValueError(f"image {im.image_id} has no captions")
    return X


def check_pairs(images, captions):
    images, captions = list(images), list(captions)
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images but {len(captions)} captions")
    return images, captions


class TagsDCMatcher(BaseEstimator):
    """Image-text matcher trained with generated hard negatives.

    Parameters
    ----------
    steps : int
        Number of joint updates.
    batch_size : int
        Positive pairs per update.
    mode : {"dynamic", "static"}
        Whether negatives come from the live model or a frozen MLM snapshot.
    warmup_steps : int
        MLM-only updates of the frozen snapshot (static mode only).
    grammar : {"toy", "full"}
        Caption grammar; fixes the vocabulary and region dimension.
    K, L, m, tau, mask_ratio, masking
        Negative generation: maskings per caption, refills per masking, pool
        size after mining, sampling temperature, masked share and masking
        scheme (``"scene_graph"`` or ``"word"``).
    negatives : {"random", "hardest"}
        How the retrieved negative image and caption are picked in a batch.
    alpha, lambda_irtm, lambda_mlm, lambda_istm, lambda_wod, lambda_woc : float
        Triplet margin and loss weights.
    woc_all_positions : bool
        Train word correction on every token instead of replaced ones only.
    optimizer, lr, clip
        ``"adam"`` or ``"sgd"``, learning rate and gradient-norm clip.
    d, n_layers, n_heads, d_ff, n_regions : int
        Backbone sizes.
    pool : {"mean", "cls"}
        Matching score from the mean of all states or from a learned summary slot.
    tie_init : bool
        Initialize region-projection rows from the matching word embeddings.
    random_state : int or None
        Seed for initialization, batching, masking and sampling.

    Attributes
    ----------
    model_ : MatchModel
    generator_model_ : MatchModel or None
        Frozen snapshot used in static mode.
    reports_ : list of StepReport
    vocabulary_ : Vocabulary
    """

    def __init__(self, steps=500, batch_size=12, mode="dynamic", warmup_steps=300,
                 grammar="toy", K=3, L=4, m=2, tau=1.0, mask_ratio=0.15,
                 masking="scene_graph", negatives="random", alpha=0.2,
                 lambda_irtm=1.0, lambda_mlm=0.1, lambda_istm=1.0, lambda_wod=0.1,
                 lambda_woc=0.1, woc_all_positions=False, optimizer="adam", lr=3e-3,
                 clip=5.0, d=64, n_layers=2, n_heads=4, d_ff=128, n_regions=8,
                 pool="cls", tie_init=True, random_state=0):
        self.steps = steps
        self.batch_size = batch_size
        self.mode = mode
        self.warmup_steps = warmup_steps
        self.grammar = grammar
        self.K = K
        self.L = L
        self.m = m
        self.tau = tau
        self.mask_ratio = mask_ratio
        self.masking = masking
        self.negatives = negatives
        self.alpha = alpha
        self.lambda_irtm = lambda_irtm
        self.lambda_mlm = lambda_mlm
        self.lambda_istm = lambda_istm
        self.lambda_wod = lambda_wod
        self.lambda_woc = lambda_woc
        self.woc_all_positions = woc_all_positions
        self.optimizer = optimizer
        self.lr = lr
        self.clip = clip
        self.d = d
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_regions = n_regions
        self.pool = pool
        self.tie_init = tie_init
        self.random_state = random_state

    # -- assembled settings
    def loss_weights(self):
        return LossWeights(self.lambda_irtm, self.lambda_mlm, self.lambda_istm,
                           self.lambda_wod, self.lambda_woc, self.alpha)

    def step_settings(self):
        if self.masking not in ("scene_graph", "word"):
            raise ValueError(f"masking must be 'scene_graph' or 'word', got {self.masking!r}")
        return StepSettings(K=self.K, L=self.L, m=self.m, tau=self.tau,
                            mask_ratio=self.mask_ratio, masking=self.masking,
                            negatives=self.negatives, woc_all_positions=self.woc_all_positions,
                            mode=GeneratorMode(self.mode))

    def _seed(self):
        rs = check_random_state(self.random_state)
        return int(rs.randint(2**31 - 1)) if self.random_state is None else int(self.random_state)

    def fit(self, X, y=None, callback=None):
        """Train on the captions of ``X``; ``y`` is ignored."""
        grammar = get_grammar(self.grammar)
        X = check_gallery(X, self.n_regions, grammar.d_img, min_images=2)
        if self.steps < 0 or self.batch_size < 2:
            raise ValueError("steps must be >= 0 and batch_size >= 2")
        weights, settings = self.loss_weights(), self.step_settings()
        seed = self._seed()
        self.vocabulary_ = grammar.vocabulary()
        self.lexicon_ = load_lexicon()
        graphs = caption_graphs(X, self.lexicon_)
        self.model_ = build_model(self.vocabulary_, grammar, seed=seed, d=self.d,
                                  n_layers=self.n_layers, n_heads=self.n_heads,
                                  n_regions=self.n_regions, d_ff=self.d_ff,
                                  tie_init=self.tie_init, pool=self.pool)
        batch_rng, rng, warm_rng = (np.random.default_rng(ss)
                                    for ss in np.random.SeedSequence(seed).spawn(3))
        self.generator_model_ = None
        if settings.mode is GeneratorMode.STATIC:
            self.generator_model_ = static_generator(
                self.model_, X, self.warmup_steps, settings,
                make_optimizer(self.optimizer, self.lr, self.clip),
                warm_rng, self.vocabulary_, graphs, self.batch_size,
            )
        self.reports_ = train(self.model_, X, self.steps, weights, settings,
                              make_optimizer(self.optimizer, self.lr, self.clip), rng,
                              self.vocabulary_, graphs, self.batch_size,
                              generator_model=self.generator_model_, callback=callback,
                              batch_rng=batch_rng)
        return self

    def decision_function(self, images, captions):
        """Matching scores in [0, 1] for aligned image and caption lists."""
        check_is_fitted(self, "model_")
        images, captions = check_pairs(images, captions)
        return itm_scores(self.model_, images, captions)

    def predict(self, images, captions):
        """1 where the pair is judged matching (score >= 0.5)."""
        return (self.decision_function(images, captions) >= 0.5).astype(int)

    def retrieval_report(self, X):
        check_is_fitted(self, "model_")
        X = check_gallery(X, self.model_.config.n_regions, self.model_.config.d_img)
        return recall_at_k(self.model_, X)

    def score(self, X, y=None):
        """Image-to-text R@1 on the gallery ``X``."""
        return self.retrieval_report(X).i2t[1]
