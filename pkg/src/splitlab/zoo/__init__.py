"""Desk-scale models, synthetic corpus and training loops."""

from splitlab.zoo.corpus import SHAPES, SyntheticCorpus, make_corpus
from splitlab.zoo.models import SPLIT_AFTER, Autoencoder, Generator, InverseNet, SplitModel, make_discriminator
from splitlab.zoo.training import (
    GanConfig,
    History,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    pixel_js_distance,
    train_autoencoder,
    train_gan,
    train_inverse_net,
    train_target,
)

__all__ = [
    "SHAPES", "SPLIT_AFTER", "Autoencoder", "GanConfig", "Generator", "History", "InverseNet",
    "SplitModel", "SyntheticCorpus", "TrainConfig", "TrainingDiverged", "accuracy", "make_corpus",
    "make_discriminator", "pixel_js_distance", "train_autoencoder", "train_gan", "train_inverse_net",
    "train_target",
]
