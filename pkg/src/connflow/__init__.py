"""Layer connectivity, prune/freeze continual learning and forgetting bounds."""

from .connectivity import ConnectivityReport, compute_report, layer_delta, pearson_abs, rank_layers, standardize
from .masking import MaskSet, PruneConfig, freeze_survivors, magnitude_prune, sparsity
from .nn import LayerSpec, Network, backward, forward, init_network, loss_ce, sgd_step
from .protocol import LabelEncoding, RunRecord, TrainConfig, eval_task, run_sequence, train_task

__version__ = "0.1.0"
