"""Parameter importance for regularised continual learning.

The main measure is activation based: for every trunk neuron, the mean of its
post-ReLU activation over a task's instances divided by the (population)
standard deviation plus ``epsilon``. The neuron value is then copied to every
incoming weight and the bias of that neuron.

EWC, SI and MAS importance are provided for comparison; all four return maps
over the same trunk parameter ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import softmax_cross_entropy
from .errors import ContractError, DegenerateDistributionError, StateError
from .network import ActivationSummary, MultiHeadNetwork, NeuronLayer

DEFAULT_EPSILON = 1e-6
MERGE_POLICIES = ("max", "sum", "replace")


# ----------------------------------------------------------------------------
# activation statistics
# ----------------------------------------------------------------------------

@dataclass
class ActivationStats:
    """Streaming count / mean / population variance per neuron (Chan et al. merge)."""

    count: int = 0
    mean: dict[str, np.ndarray] = field(default_factory=dict)
    m2: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def neurons(self) -> set[str]:
        return set(self.mean)

    def variance(self, layer: str) -> np.ndarray:
        return self.m2[layer] / self.count

    def update(self, summary: ActivationSummary | dict) -> "ActivationStats":
        layers = summary.layers if isinstance(summary, ActivationSummary) else summary
        if self.count and set(layers) != self.neurons:
            raise ContractError(f"summary layers {sorted(layers)} do not match stats layers {sorted(self.neurons)}")
        sizes = {np.asarray(a).shape[0] for a in layers.values()}
        if len(sizes) != 1:
            raise ContractError("all layers of a summary must cover the same instances")
        nb = sizes.pop()
        if nb == 0:
            return self
        n = self.count
        total = n + nb
        for name, acts in layers.items():
            acts = np.asarray(acts, dtype=np.float64)
            if self.count and acts.shape[1:] != self.mean[name].shape:
                raise ContractError(f"neuron count of layer {name!r} changed")
            bmean = acts.mean(axis=0)
            bm2 = ((acts - bmean) ** 2).sum(axis=0)
            if n == 0:
                self.mean[name], self.m2[name] = bmean, bm2
                continue
            delta = bmean - self.mean[name]
            self.mean[name] = self.mean[name] + delta * (nb / total)
            self.m2[name] = self.m2[name] + bm2 + delta ** 2 * (n * nb / total)
        self.count = total
        return self


def accumulate_activation_stats(stats: ActivationStats | None, summary) -> ActivationStats:
    return (stats if stats is not None else ActivationStats()).update(summary)


def neuron_importance(stats: ActivationStats, epsilon: float = DEFAULT_EPSILON,
                      normalize_std: bool = True) -> dict[str, np.ndarray]:
    """Per-neuron importance ``mean / (std + epsilon)``.

    With ``normalize_std=False`` the plain mean activation is returned
    (the mean-only variant used for layer-balance comparisons).
    """
    if stats.count < 1:
        raise StateError("no activations accumulated")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = {}
    for name, mean in stats.mean.items():
        if normalize_std:
            sigma = np.sqrt(np.maximum(stats.variance(name), 0.0))
            out[name] = mean / (sigma + epsilon)
        else:
            out[name] = mean.copy()
    return out


# ----------------------------------------------------------------------------
# importance maps
# ----------------------------------------------------------------------------

@dataclass
class ImportanceMap:
    """Per-parameter importance over the trunk, plus the per-neuron values it came from."""

    params: dict[str, np.ndarray]
    groups: dict[str, tuple[str, ...]]  # layer name -> parameter ids
    neurons: dict[str, np.ndarray] = field(default_factory=dict)
    epsilon: float | None = None
    method: str = "ours"

    def keys(self):
        return self.params.keys()

    def __getitem__(self, key):
        return self.params[key]

    def to_json(self) -> str:
        """Parameter id -> flat list of values, plus layer grouping and neuron values."""
        doc = {
            "method": self.method,
            "epsilon": self.epsilon,
            "groups": {k: list(v) for k, v in self.groups.items()},
            "neurons": {k: v.tolist() for k, v in self.neurons.items()},
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.params.items()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ImportanceMap":
        doc = json.loads(text)
        params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(
            params=params,
            groups={k: tuple(v) for k, v in doc["groups"].items()},
            neurons={k: np.asarray(v, dtype=np.float64) for k, v in doc["neurons"].items()},
            epsilon=doc["epsilon"],
            method=doc["method"],
        )


def topology_groups(topology: list[NeuronLayer]) -> dict[str, tuple[str, ...]]:
    return {nl.name: (nl.weight_id, nl.bias_id) for nl in topology}


def expand_to_weights(omega: dict[str, np.ndarray], topology: list[NeuronLayer]) -> dict[str, np.ndarray]:
    """Copy each neuron's importance onto all its incoming weights and its bias."""
    out = {}
    for nl in topology:
        if nl.name not in omega:
            raise ContractError(f"no importance for neurons of layer {nl.name!r}")
        om = np.asarray(omega[nl.name], dtype=np.float64)
        if om.shape != (nl.n_neurons,):
            raise ContractError(f"layer {nl.name!r} has {nl.n_neurons} neurons, got {om.shape}")
        if nl.kind == "dense":
            out[nl.weight_id] = np.broadcast_to(om[None, :], nl.weight_shape).copy()
        else:
            out[nl.weight_id] = np.broadcast_to(om[:, None, None, None], nl.weight_shape).copy()
        out[nl.bias_id] = om.copy()
    return out


def activation_importance(net: MultiHeadNetwork, x, task_id, epsilon: float = DEFAULT_EPSILON,
                          normalize_std: bool = True, batch_size: int = 1024) -> ImportanceMap:
    """One inference pass over ``x`` collecting stats, then neuron -> weight importance."""
    stats = ActivationStats()
    for i in range(0, len(x), batch_size):
        _, summary = net.forward_with_activations(x[i:i + batch_size], task_id)
        stats.update(summary)
    omega = neuron_importance(stats, epsilon, normalize_std)
    return ImportanceMap(
        params=expand_to_weights(omega, net.topology),
        groups=topology_groups(net.topology),
        neurons=omega,
        epsilon=epsilon,
        method="ours" if normalize_std else "mean",
    )


def merge_task_importance(prev: ImportanceMap | None, new: ImportanceMap, policy: str = "max") -> ImportanceMap:
    """Combine importance of earlier tasks with that of the task just finished."""
    if policy not in MERGE_POLICIES:
        raise ValueError(f"unknown merge policy {policy!r}")
    if prev is None or policy == "replace":
        if prev is not None and set(prev.params) != set(new.params):
            raise ContractError("importance maps cover different parameters")
        return new
    if set(prev.params) != set(new.params):
        raise ContractError("importance maps cover different parameters")
    op = np.maximum if policy == "max" else np.add
    params = {k: op(prev.params[k], new.params[k]) for k in new.params}
    neurons = {k: op(prev.neurons[k], v) for k, v in new.neurons.items()
               if k in prev.neurons and prev.neurons[k].shape == v.shape}
    return ImportanceMap(params, new.groups, neurons, new.epsilon, new.method)


def layer_importance_distribution(imap: ImportanceMap) -> dict[str, float]:
    """Mean per-parameter importance of each layer, normalised to sum to one."""
    if not imap.groups:
        raise ContractError("importance map has no layers")
    means = {}
    for layer, ids in imap.groups.items():
        total = sum(float(imap.params[k].sum()) for k in ids)
        count = sum(imap.params[k].size for k in ids)
        means[layer] = total / count
    z = sum(means.values())
    if z <= 0:
        raise DegenerateDistributionError("all layer importances are zero")
    return {layer: m / z for layer, m in means.items()}


# ----------------------------------------------------------------------------
# baselines
# ----------------------------------------------------------------------------

def _per_sample_grads(net, x, task_id, seed_fn, n_samples):
    if len(x) == 0:
        raise StateError("importance requested on empty data")
    n = len(x) if n_samples is None else min(int(n_samples), len(x))
    for i in range(n):
        logits = net.forward(x[i:i + 1], task_id)
        yield net.backward(seed_fn(logits, i))


def _restrict(grads_sum, net, task_id, include_head, n):
    keys = list(net.trunk_ids) + (list(net.head_ids(task_id)) if include_head else [])
    return {k: grads_sum[k] / n for k in keys}


def ewc_fisher(net: MultiHeadNetwork, x, y, task_id, n_samples: int | None = None,
               include_head: bool = False) -> ImportanceMap:
    """Empirical diagonal Fisher: mean of squared per-sample log-likelihood gradients."""
    y = np.asarray(y)
    n = len(x) if n_samples is None else min(int(n_samples), len(x))
    acc: dict[str, np.ndarray] = {}

    def seed(logits, i):
        # d(-log p_y)/dlogits; the sign is irrelevant once squared
        return softmax_cross_entropy(logits, y[i:i + 1])[1]

    for g in _per_sample_grads(net, x, task_id, seed, n_samples):
        for k, v in g.items():
            acc[k] = acc[k] + v * v if k in acc else v * v
    return ImportanceMap(_restrict(acc, net, task_id, include_head, n), topology_groups(net.topology), method="ewc")


def mas_importance(net: MultiHeadNetwork, x, task_id, n_samples: int | None = None,
                   include_head: bool = False) -> ImportanceMap:
    """Mean over samples of |d ||logits||_2^2 / dw|."""
    n = len(x) if n_samples is None else min(int(n_samples), len(x))
    acc: dict[str, np.ndarray] = {}
    for g in _per_sample_grads(net, x, task_id, lambda logits, i: 2.0 * logits, n_samples):
        for k, v in g.items():
            acc[k] = acc[k] + np.abs(v) if k in acc else np.abs(v)
    return ImportanceMap(_restrict(acc, net, task_id, include_head, n), topology_groups(net.topology), method="mas")


class SIAccumulator:
    """Streams the SI path integral ``sum_steps -grad * delta`` per parameter."""

    def __init__(self, keys):
        self.keys = tuple(keys)
        self.omega: dict[str, np.ndarray] | None = None

    def record(self, grads: dict[str, np.ndarray], delta: dict[str, np.ndarray]) -> None:
        if not set(self.keys) <= set(grads) or not set(self.keys) <= set(delta):
            raise ContractError("SI trace step is missing parameters")
        if self.omega is None:
            self.omega = {k: np.zeros_like(delta[k]) for k in self.keys}
        for k in self.keys:
            if grads[k].shape != delta[k].shape:
                raise ContractError(f"gradient and delta shapes differ for {k!r}")
            self.omega[k] -= grads[k] * delta[k]

    def importance(self, initial, final, damping: float = 0.1) -> dict[str, np.ndarray]:
        out = {}
        for k in self.keys:
            total = final[k] - initial[k]
            w = self.omega[k] if self.omega is not None else np.zeros_like(total)
            out[k] = np.maximum(w / (total ** 2 + damping), 0.0)
        return out


def si_path_integral(trace, initial, final, damping: float = 0.1, groups=None) -> ImportanceMap:
    """SI importance from an iterable of per-step ``(grads, delta)`` pairs."""
    keys = list(initial)
    if set(final) != set(keys):
        raise ContractError("initial and final parameters differ in keys")
    acc = SIAccumulator(keys)
    for grads, delta in trace:
        acc.record(grads, delta)
    return ImportanceMap(acc.importance(initial, final, damping), groups or {}, method="si")

