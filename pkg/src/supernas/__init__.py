"""Weight-sharing channel supernets on a small numpy autodiff engine.

The modules stack bottom-up: ``autodiff`` (tensors and ops), ``space`` and
``supernet`` (search space, shared weights, slicing, splitting), ``data``,
``training``, ``evaluation`` and ``experiments``, with ``cli`` on top.
"""
from .autodiff import NumericError, ShapeError, Tensor, backward, no_grad
from .space import (
    SearchSpace,
    SubnetEncoding,
    build_search_space,
    count_subnets,
    enhance_candidates,
    resnet20_search_space,
)
from .supernet import extract_subnet, init_supernet, progressive_split, slice_forward
from .training import TrainConfig, derive_seed, run_progressive_pipeline, train_supernet
from .evaluation import kendall_tau_b, pearson, rank_correlations, spearman
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "NumericError", "ShapeError", "Tensor", "backward", "no_grad",
    "SearchSpace", "SubnetEncoding", "build_search_space", "count_subnets", "enhance_candidates",
    "resnet20_search_space", "extract_subnet", "init_supernet", "progressive_split", "slice_forward",
    "TrainConfig", "derive_seed", "run_progressive_pipeline", "train_supernet",
    "kendall_tau_b", "pearson", "rank_correlations", "spearman", "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
