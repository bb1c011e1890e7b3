"""Sequential multi-head training with an importance-weighted quadratic anchor penalty.

For task t the loss is ``CE(current head) + alpha * sum_l Omega_l (w_l_prev - w_l)^2``
over trunk parameters, where ``w_prev`` are the trunk weights at the end of the
previous task and ``Omega`` the accumulated per-parameter importance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import AdamState, adam_step, softmax_cross_entropy
from .data import TaskSpec
from .errors import ConfigError, ContractError, StateError
from .importance import (
    MERGE_POLICIES,
    ImportanceMap,
    SIAccumulator,
    activation_importance,
    ewc_fisher,
    mas_importance,
    merge_task_importance,
    topology_groups,
)
from .metrics import AccuracyMatrix
from .network import MultiHeadNetwork, NetworkConfig, build_network

log = logging.getLogger(__name__)

IMPORTANCE_METHODS = ("ours", "mean", "ewc", "si", "mas", "none")

# seed-derivation purposes
_SHUFFLE, _REINIT, _SUBSAMPLE = 1, 2, 3


@dataclass
class TrainConfig:
    alpha: float = 0.0045
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    reinit: bool = False
    merge_policy: str = "max"
    epsilon: float = 1e-6
    importance: str = "ours"
    si_damping: float = 0.1
    fisher_samples: int | None = 1000
    mas_samples: int | None = 1000

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.epsilon <= 0:
            raise ConfigError("lr and epsilon must be positive")
        if self.importance not in IMPORTANCE_METHODS:
            raise ConfigError(f"importance must be one of {IMPORTANCE_METHODS}, got {self.importance!r}")
        if self.merge_policy not in MERGE_POLICIES:
            raise ConfigError(f"merge_policy must be one of {MERGE_POLICIES}, got {self.merge_policy!r}")


@dataclass
class TrainerState:
    net: MultiHeadNetwork
    anchors: dict[str, np.ndarray] | None = None
    importance: ImportanceMap | None = None
    completed: list[TaskSpec] = field(default_factory=list)


@dataclass
class TaskResult:
    task_id: int
    position: int
    epoch_losses: list[float]
    accuracies: dict  # task id -> accuracy (%) after this task
    first_penalty: float = 0.0


def derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def _importance_params(importance) -> dict[str, np.ndarray]:
    return importance.params if isinstance(importance, ImportanceMap) else importance


def regularization_penalty(params, anchors, importance) -> float:
    """``sum_l Omega_l (w_prev_l - w_l)^2`` (without the strength factor)."""
    omega = _importance_params(importance)
    if set(params) != set(anchors) or set(params) != set(omega):
        raise ContractError("params, anchors and importance must share one key set")
    return float(sum(np.sum(omega[k] * (anchors[k] - params[k]) ** 2) for k in params))


def penalty_gradient(params, anchors, importance) -> dict[str, np.ndarray]:
    omega = _importance_params(importance)
    return {k: 2.0 * omega[k] * (params[k] - anchors[k]) for k in params}


def _penalty_active(state: TrainerState, config: TrainConfig) -> bool:
    return state.anchors is not None and state.importance is not None and config.importance != "none"


def total_loss(x, y, task_id, state: TrainerState, config: TrainConfig, return_ce_grads: bool = False):
    """Cross-entropy of the current head plus ``alpha`` times the anchor penalty.

    Returns ``(loss, grads)`` where grads cover the trunk and the current head.
    With ``return_ce_grads`` a copy of the cross-entropy-only gradients is appended.
    """
    net = state.net
    logits = net.forward(x, task_id)
    loss, dlogits = softmax_cross_entropy(logits, y)
    grads = net.backward(dlogits)
    ce_grads = {k: g.copy() for k, g in grads.items()} if return_ce_grads else None
    if _penalty_active(state, config) and config.alpha > 0:
        trunk = net.trunk_params()
        loss = loss + config.alpha * regularization_penalty(trunk, state.anchors, state.importance)
        for k, g in penalty_gradient(trunk, state.anchors, state.importance).items():
            grads[k] += config.alpha * g
    if return_ce_grads:
        return loss, grads, ce_grads
    return loss, grads


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

def evaluate(net: MultiHeadNetwork, task: TaskSpec, task_id=None, split: str = "test") -> float:
    """Argmax accuracy (%) of ``task_id``'s head on one split of ``task``."""
    ds = task.test if split == "test" else task.train
    tid = task.task_id if task_id is None else task_id
    net.head(tid)
    if len(ds) == 0:
        raise StateError("evaluation on an empty split")
    pred = net.predict(ds.features, tid).argmax(axis=1)
    return float(100.0 * np.mean(pred == ds.labels))


def _subsample(x, y, n, seed):
    if n is None or n >= len(x):
        return x, y
    idx = np.sort(np.random.default_rng(seed).permutation(len(x))[:n])
    return x[idx], y[idx]


def compute_importance(state: TrainerState, task: TaskSpec, config: TrainConfig, position: int,
                       si: SIAccumulator | None = None, initial=None) -> ImportanceMap:
    """Importance of the task just trained, on its training split, network in inference mode."""
    net = state.net
    train = task.train
    groups = topology_groups(net.topology)
    method = config.importance
    if method in ("ours", "mean"):
        return activation_importance(net, train.features, task.task_id, config.epsilon,
                                     normalize_std=(method == "ours"))
    if method == "ewc":
        x, y = _subsample(train.features, train.labels, config.fisher_samples,
                          derive_seed(config.seed, _SUBSAMPLE, position))
        return ewc_fisher(net, x, y, task.task_id)
    if method == "mas":
        x, _ = _subsample(train.features, train.labels, config.mas_samples,
                          derive_seed(config.seed, _SUBSAMPLE, position))
        return mas_importance(net, x, task.task_id)
    if method == "si":
        params = si.importance(initial, net.snapshot_trunk(), config.si_damping)
        return ImportanceMap(params, groups, method="si")
    return ImportanceMap({k: np.zeros_like(net.params[k]) for k in net.trunk_ids}, groups, method="none")


def train_task(state: TrainerState, task: TaskSpec, config: TrainConfig) -> tuple[TrainerState, TaskResult]:
    net = state.net
    position = len(state.completed)
    train = task.train
    if len(train) == 0:
        raise StateError(f"task {task.task_id} has no training data")

    if config.reinit and state.completed:
        net.reinitialize_trunk(derive_seed(config.seed, _REINIT, position))
    net.add_head(task.task_id, task.n_classes)

    keys = list(net.trunk_ids) + list(net.head_ids(task.task_id))
    params = {k: net.params[k] for k in keys}
    opt = AdamState.for_params(params, lr=config.lr)

    first_penalty = 0.0
    if _penalty_active(state, config):
        first_penalty = regularization_penalty(net.trunk_params(), state.anchors, state.importance)

    use_si = config.importance == "si"
    si = SIAccumulator(net.trunk_ids) if use_si else None
    initial = net.snapshot_trunk() if use_si else None

    x_all, y_all = train.features, train.labels
    n = len(train)
    epoch_losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(config.seed, _SHUFFLE, position, epoch)).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if use_si:
                loss, grads, ce_grads = total_loss(x_all[idx], y_all[idx], task.task_id, state, config,
                                                   return_ce_grads=True)
                before = {k: params[k].copy() for k in net.trunk_ids}
            else:
                loss, grads = total_loss(x_all[idx], y_all[idx], task.task_id, state, config)
            adam_step(params, grads, opt)
            if use_si:
                si.record(ce_grads, {k: params[k] - before[k] for k in net.trunk_ids})
            total += loss * len(idx)
            seen += len(idx)
        epoch_losses.append(total / seen)
        log.debug("task %s epoch %d loss %.5f", task.task_id, epoch, epoch_losses[-1])

    new_imp = compute_importance(state, task, config, position, si, initial)
    state.importance = merge_task_importance(state.importance, new_imp, config.merge_policy)
    state.anchors = net.snapshot_trunk()
    state.completed.append(task)

    accuracies = {t.task_id: evaluate(net, t) for t in state.completed}
    return state, TaskResult(task.task_id, position, epoch_losses, accuracies, first_penalty)


@dataclass
class SequenceRun:
    matrix: AccuracyMatrix
    results: list[TaskResult]
    state: TrainerState


def run_sequence(tasks, config: TrainConfig, net_config: NetworkConfig) -> SequenceRun:
    """Train ``tasks`` in order; after step j evaluate tasks 1..j on their own heads."""
    tasks = list(tasks)
    if not tasks:
        raise StateError("empty task sequence")
    state = TrainerState(build_network(net_config))
    matrix = AccuracyMatrix.empty(len(tasks))
    results = []
    for j, task in enumerate(tasks):
        state, result = train_task(state, task, config)
        for k, earlier in enumerate(tasks[:j + 1]):
            matrix.values[k, j] = result.accuracies[earlier.task_id]
        results.append(result)
    return SequenceRun(matrix, results, state)
