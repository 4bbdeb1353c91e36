"""Generative augmentation plus iterative pseudo-labeling for small
grayscale image datasets, with a config-driven experiment runner."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    ImageSample,
    LabeledDataset,
    ToyCorpusSpec,
    load_dataset,
    make_toy_corpus,
    patchify,
    save_dataset,
    split_dataset,
)
from .errors import (  # noqa: F401
    ConfigError,
    ContractError,
    DatasetLoadError,
    SsgnetError,
    StageError,
    TrainingDiverged,
)
