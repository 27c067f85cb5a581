"""Spatio-temporal graph learning for active speaker detection."""

from .graph import Chunk, EdgeSet, FaceBox, build_edges, edge_dropout, order_and_chunk
from .metrics import average_precision, evaluate, run_ablation, run_sweep
from .model import ModelConfig, SpellModel, init_params, param_count
from .train import TrainConfig, train

__version__ = "0.1.0"
