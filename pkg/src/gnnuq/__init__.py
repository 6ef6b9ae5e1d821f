"""Graph neural network architecture search with ensemble uncertainty quantification."""

from .archspace import DEFAULT_SPACE, Genome, SearchSpace, cardinality
from .molgraph import load_dataset, parse_smiles, split_dataset
from .mpnn import forward, instantiate, load_model, save_model
from .trainer import TrainConfig, mc_dropout_predict, nll_loss, train
from .uq import PredictionSet, ensemble_summary

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SPACE", "Genome", "PredictionSet", "SearchSpace", "TrainConfig", "cardinality",
    "ensemble_summary", "forward", "instantiate", "load_dataset", "load_model", "mc_dropout_predict",
    "nll_loss", "parse_smiles", "save_model", "split_dataset", "train",
]
