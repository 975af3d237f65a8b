"""Federated learning with noisy labels: FedAvg, small-loss and k-reliable-neighbour selection."""

from ._backend import COMPILED
from .data import (
    ClientPartition,
    Dataset,
    LabeledExample,
    NoiseSpec,
    dirichlet_partition,
    inject_noise,
    linear_noise_schedule,
    make_blobs,
    shard_partition,
)
from .federation import DataConfig, SimulationConfig, run_simulation
from .gmm import EmConfig, Gmm1D2, clean_posterior, fit_em
from .model import ModelParams, TrainConfig, init_model

__version__ = "0.1.0"

__all__ = [
    "COMPILED",
    "ClientPartition",
    "DataConfig",
    "Dataset",
    "EmConfig",
    "Gmm1D2",
    "LabeledExample",
    "ModelParams",
    "NoiseSpec",
    "SimulationConfig",
    "TrainConfig",
    "clean_posterior",
    "dirichlet_partition",
    "fit_em",
    "init_model",
    "inject_noise",
    "linear_noise_schedule",
    "make_blobs",
    "run_simulation",
    "shard_partition",
]
