"""Continual learning with activation-statistics neuron importance."""
from .network import MultiHeadNetwork, NetworkConfig, build_network
from .importance import ImportanceMap, activation_importance, merge_task_importance, neuron_importance
from .trainer import TrainConfig, run_sequence, train_task
from .metrics import AccuracyMatrix, aggregate_over_orders, doi, la_accuracy

__version__ = "0.1.0"
