"""Channel-space gridization: LSCM forward model, CSG autoencoder, baselines and metrics."""

from .datagen import SyntheticConfig, SyntheticDataset, gen_dataset, load_dataset, save_dataset
from .lscm import AngularGrid, AntennaConfig, BeamPatternMatrix, build_beam_pattern, default_beam_pattern, forward_rsrp
from .model import Codebook, GridCapsSummary, predict_under_beam, quantize
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = ["AngularGrid", "AntennaConfig", "BeamPatternMatrix", "Codebook", "GridCapsSummary", "SyntheticConfig",
           "SyntheticDataset", "TrainConfig", "TrainResult", "build_beam_pattern", "default_beam_pattern",
           "forward_rsrp", "gen_dataset", "load_dataset", "predict_under_beam", "quantize", "save_dataset", "train"]
