"""Domain-disentangled self-supervised pretraining on synthetic multi-domain data."""

from .config import ExperimentConfig, load_config, validate
from .datagen import AugmentRecipe, MultiDomainDataset, generate_colored, make_colored_shapes, synth_gaussian_domains
from .encoder import EncoderSpec, build_encoder, encode, split
from .trainer import Trainer, fit

__all__ = [
    "AugmentRecipe",
    "EncoderSpec",
    "ExperimentConfig",
    "MultiDomainDataset",
    "Trainer",
    "build_encoder",
    "encode",
    "fit",
    "generate_colored",
    "load_config",
    "make_colored_shapes",
    "split",
    "synth_gaussian_domains",
    "validate",
]

__version__ = "0.1.0"
