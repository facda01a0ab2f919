"""Multimodal post classification with image-text contrastive and matching auxiliary losses."""

from .errors import ConfigError, InputError
from .losses import PRESETS, LossWeights
from .synthdata import Dataset, Post, RelationTag, SynthConfig, generate, split, subsample
from .trainer import RunRecord, TrainConfig, run_multi_seed, sweep_fractions, train

__version__ = "0.1.0"
