"""Continual multi-treatment uplift modelling on drifting data streams."""
from ._backend import COMPILED
from .datagen import ObservationBatch, PeriodDataset, gen_period, gen_stream, load_csv, write_csv
from .incremental import IcepkdConfig, ReplayBuffer, StageState, incremental_stage, run_stream
from .metrics import evaluate, qini_coefficient, ras_aucc, stability
from .model import DrcfrConfig, DrcfrModel, train

__version__ = "0.1.0"

__all__ = [
    "COMPILED",
    "DrcfrConfig",
    "DrcfrModel",
    "IcepkdConfig",
    "ObservationBatch",
    "PeriodDataset",
    "ReplayBuffer",
    "StageState",
    "evaluate",
    "gen_period",
    "gen_stream",
    "incremental_stage",
    "load_csv",
    "qini_coefficient",
    "ras_aucc",
    "run_stream",
    "stability",
    "train",
    "write_csv",
]
