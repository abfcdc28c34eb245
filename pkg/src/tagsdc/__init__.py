"""Image-text matching trained with generated, scene-graph-guided hard negatives."""
from .datagen import FULL_GRAMMAR, TOY_GRAMMAR, Grammar, generate_dataset, read_jsonl, write_jsonl
from .estimator import TagsDCMatcher
from .model import MatchModel, ModelConfig, itm_score
from .training import GeneratorMode, LossWeights, StepSettings

__version__ = "0.1.0"

__all__ = [
    "FULL_GRAMMAR",
    "TOY_GRAMMAR",
    "Grammar",
    "GeneratorMode",
    "LossWeights",
    "MatchModel",
    "ModelConfig",
    "StepSettings",
    "TagsDCMatcher",
    "generate_dataset",
    "itm_score",
    "read_jsonl",
    "write_jsonl",
]
