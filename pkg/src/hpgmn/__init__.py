"""Graph memory network for node classification on heterophilous graphs."""

from .graph import (Graph, SplitSet, DatasetError, edge_homophily,
                    generate_heterophilous_sbm, load_dataset, make_graph,
                    node_homophily, random_splits, save_dataset)
from .local_stats import (LocalStatistics, PseudoLabels, StatMasks,
                          assemble_local_statistics,
                          fit_pseudo_label_estimator,
                          label_wise_class_distribution,
                          label_wise_feature_distribution, ppr_diffusion)
from .memory import (MemoryBank, attend, entropy_loss, frobenius_penalty,
                     init_memory, kpattern_loss, memory_diagnostics,
                     read_values)
from .model import HpGmnModel, ModelConfig, RunMetrics, evaluate, train
from .nn import (Mlp, TrainConfig, TrainingDiverged, cross_entropy_loss,
                 grad_check, mlp_forward, optimizer_step, softmax_rows)

__version__ = "0.1.0"
