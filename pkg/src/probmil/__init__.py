"""Multiple instance learning with attention pooling.

A bag prediction is the expectation of per-instance classifier outputs
under a learned per-bag, per-class probability measure over instances.
Collective (mean), max and weighted-collective pooling are provided for
comparison.
"""

from .archive import read_archive, write_archive
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Bag, Dataset, SyntheticSpec, generate_synthetic, split
from .estimator import MilClassifier
from .metrics import MetricsReport, auc, average_precision, d_prime, evaluate
from .model import (
    Attention,
    Collective,
    MaxSelection,
    MilNetwork,
    ProbabilityMeasure,
    WeightedCollective,
    forward_bag,
    init_network,
)
from .tensor_core import Rng
from .training import ExperimentConfig, RunLog, train

__version__ = "0.1.0"

__all__ = [
    "Attention", "Bag", "Collective", "Dataset", "ExperimentConfig", "MaxSelection",
    "MetricsReport", "MilClassifier", "MilNetwork", "ProbabilityMeasure", "Rng", "RunLog",
    "SyntheticSpec", "WeightedCollective", "auc", "average_precision", "d_prime", "evaluate",
    "forward_bag", "generate_synthetic", "init_network", "load_checkpoint", "read_archive",
    "save_checkpoint", "split", "train", "write_archive",
]
