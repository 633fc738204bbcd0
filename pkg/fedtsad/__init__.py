from .dataset import load_dataset, make_windows, normalize
from .federation import FederationConfig, aggregate_weighted, run_round, run_training
from .metrics import auc_pr, auc_roc, best_f1_threshold, evaluate, point_adjust
from .models import ModelConfig, extract_representation, init_model, local_train_epoch, score_series
from .params import ParameterSet
from .partition import PartitionConfig, partition
from .report import emit_report
from .runner import ExperimentConfig, run_experiment, run_grid
