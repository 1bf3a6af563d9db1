"""Interpretable multi-variable LSTM forecasting with mixture attention."""
from .cell import CellConfig, count_params, step_flop_estimate, unroll
from .dataio import SeriesTable, WindowedDataset, load_csv, make_windows, prepare, standardize
from .evalx import SyntheticSpec, generate_synthetic, mae, rank_variables, rmse
from .mixture import HeadConfig, forward_head
from .trainer import Checkpoint, ImportanceState, Model, TrainConfig, fit, load, save

__version__ = "0.1.0"
