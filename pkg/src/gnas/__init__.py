"""Layer-wise greedy search over tree-shaped multi-label networks with shared weights."""

__version__ = "0.1.0"

from .arch import (Architecture, NetworkShape, count_architectures, descendants,
                   enumerate_architectures, random_architecture, set_layer_uniform_parent,
                   validate)
from .nn import Batch, WeightStore, accuracy_per_attribute, forward, train_step
from .search import SearchConfig, finetune, run_search, update_layer

__all__ = [
    "Architecture", "NetworkShape", "count_architectures", "descendants",
    "enumerate_architectures", "random_architecture", "set_layer_uniform_parent", "validate",
    "Batch", "WeightStore", "accuracy_per_attribute", "forward", "train_step",
    "SearchConfig", "finetune", "run_search", "update_layer",
]
