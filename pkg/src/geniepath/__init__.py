"""GeniePath adaptive path layers on a small numpy autodiff core."""

from .autodiff import SegmentIndex, Tape, Tensor, grad_check
from .data import Dataset, SynthSpec, gen_planted_path, load_dataset
from .graph import (Graph, NormalizedAdjacency, add_self_loops, build_graph, neighborhood,
                    row_norm_adjacency, sym_norm_adjacency)
from .model import Adam, Metrics, Model, ModelConfig, evaluate, masked_loss, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "Dataset", "Graph", "Metrics", "Model", "ModelConfig", "NormalizedAdjacency",
    "SegmentIndex", "SynthSpec", "Tape", "Tensor", "add_self_loops", "build_graph", "evaluate",
    "gen_planted_path", "grad_check", "load_dataset", "masked_loss", "neighborhood",
    "row_norm_adjacency", "sym_norm_adjacency", "train",
]
