"""Multi-head networks: a shared trunk plus one output head per task."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    Conv2d,
    Dense,
    Flatten,
    GradientSet,
    MaxPool2d,
    ReLU,
    as_tensor,
    global_avg_pool,
    relu,
    run_backward,
    run_forward,
)
from .errors import ConfigError, FormatError, StateError, UnknownTaskError

CHECKPOINT_VERSION = 1
ARCHITECTURES = ("mlp", "conv6")


@dataclass
class NetworkConfig:
    arch: str = "mlp"
    input_shape: tuple[int, ...] = (784,)
    hidden: tuple[int, ...] = (400, 400)
    channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    dense_width: int = 256
    channel_multiplier: int = 1
    seed: int = 0
    # adds ReLU(head output) to the activation summary (permuted-MNIST setting)
    head_relu_importance: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(int(c) for c in self.channels)
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unsupported architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if int(self.channel_multiplier) != self.channel_multiplier or self.channel_multiplier < 1:
            raise ConfigError("channel_multiplier must be an integer >= 1")
        self.channel_multiplier = int(self.channel_multiplier)
        if any(d <= 0 for d in self.input_shape + self.hidden + self.channels) or self.dense_width <= 0:
            raise ConfigError("widths, channels and input extents must be positive")
        if self.arch == "conv6":
            if len(self.channels) != 6:
                raise ConfigError("conv6 needs exactly six channel counts")
            if len(self.input_shape) != 3:
                raise ConfigError("conv6 needs a (channels, height, width) input shape")


@dataclass(frozen=True)
class NeuronLayer:
    """Topology record: the neurons of one trunk layer and their incoming-edge parameters."""

    name: str
    kind: str  # "dense" | "conv"
    n_neurons: int
    weight_id: str
    bias_id: str
    fan_in: int
    weight_shape: tuple[int, ...]


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _head_seed(seed: int, task_id) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), 0x4EAD, zlib.crc32(str(task_id).encode())])


@dataclass
class ActivationSummary:
    """Per-instance, per-neuron post-ReLU activations, keyed by neuron layer name.

    Conv layers contribute the global average of each feature map.
    """

    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def n_instances(self) -> int:
        return next(iter(self.layers.values())).shape[0] if self.layers else 0


class MultiHeadNetwork:
    """Shared trunk with per-task heads.

    Parameters live in ``self.params`` keyed by stable string ids
    (``fc1.w``, ``conv3.b``, ``head.<task>.w``). Ids never change across
    head addition or trunk re-initialization.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.layers: list = []
        self.topology: list[NeuronLayer] = []
        self.params: dict[str, np.ndarray] = {}
        self.heads: dict = {}  # task_id -> Dense
        self.trunk_ids: list[str] = []
        self._tape = None
        self._build()
        self.reinitialize_trunk(config.seed)

    # -- construction ---------------------------------------------------------

    def _build(self):
        cfg = self.config
        if cfg.arch == "mlp":
            width = int(np.prod(cfg.input_shape))
            if len(cfg.input_shape) > 1:
                self.layers.append(Flatten())
            for i, h in enumerate(cfg.hidden, start=1):
                self._add_dense(f"fc{i}", width, h)
                width = h
            self.out_features = width
            return

        c, h, w = cfg.input_shape
        chans = [ch * cfg.channel_multiplier for ch in cfg.channels]
        for i, c_out in enumerate(chans, start=1):
            conv = Conv2d(f"conv{i}", c, c_out, kernel=3, stride=1, padding=1)
            self.layers += [conv, ReLU(tag=conv.name)]
            self.topology.append(NeuronLayer(conv.name, "conv", c_out, *conv.param_ids, fan_in=c * 9,
                                             weight_shape=(c_out, c, 3, 3)))
            self.trunk_ids += conv.param_ids
            c = c_out
            if i % 2 == 0:
                self.layers.append(MaxPool2d(2))
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ConfigError(f"input {cfg.input_shape} too small for three 2x2 pooling stages")
        self.layers.append(Flatten())
        self._add_dense("fc1", c * h * w, cfg.dense_width * cfg.channel_multiplier)
        self.out_features = cfg.dense_width * cfg.channel_multiplier

    def _add_dense(self, name, n_in, n_out):
        layer = Dense(name, n_in, n_out)
        self.layers += [layer, ReLU(tag=name)]
        self.topology.append(NeuronLayer(name, "dense", n_out, *layer.param_ids, fan_in=n_in,
                                             weight_shape=(n_in, n_out)))
        self.trunk_ids += layer.param_ids

    def reinitialize_trunk(self, seed: int) -> "MultiHeadNetwork":
        """Resample every trunk parameter (He-uniform weights, zero biases). Heads are untouched."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, Dense):
                self.params[layer.param_ids[0]] = _he_uniform(rng, (layer.n_in, layer.n_out), layer.n_in)
                self.params[layer.param_ids[1]] = np.zeros(layer.n_out)
            elif isinstance(layer, Conv2d):
                fan_in = layer.c_in * layer.kernel * layer.kernel
                shape = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
                self.params[layer.param_ids[0]] = _he_uniform(rng, shape, fan_in)
                self.params[layer.param_ids[1]] = np.zeros(layer.c_out)
        self._tape = None
        return self

    def add_head(self, task_id, classes: int) -> "MultiHeadNetwork":
        if task_id in self.heads:
            raise StateError(f"head for task {task_id!r} already exists")
        head = Dense(f"head.{task_id}", self.out_features, int(classes))
        rng = np.random.default_rng(_head_seed(self.config.seed, task_id))
        self.params[head.param_ids[0]] = _he_uniform(rng, (head.n_in, head.n_out), head.n_in)
        self.params[head.param_ids[1]] = np.zeros(head.n_out)
        self.heads[task_id] = head
        return self

    # -- views ---------------------------------------------------------------

    def head(self, task_id) -> Dense:
        try:
            return self.heads[task_id]
        except KeyError:
            raise UnknownTaskError(f"no head for task {task_id!r}") from None

    def head_ids(self, task_id) -> tuple[str, str]:
        return self.head(task_id).param_ids

    def trunk_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in self.trunk_ids}

    def snapshot_trunk(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].copy() for k in self.trunk_ids}

    def layer_of(self, param_id: str) -> str:
        return param_id.rsplit(".", 1)[0]

    @property
    def n_trunk_params(self) -> int:
        return sum(self.params[k].size for k in self.trunk_ids)

    # -- passes --------------------------------------------------------------

    def _check_input(self, x):
        x = as_tensor(x, "input batch")
        if x.shape[1:] != self.config.input_shape and not (
            self.config.arch == "mlp" and x.ndim == 2 and x.shape[1] == np.prod(self.config.input_shape)
        ):
            raise StateError(f"input batch shape {x.shape[1:]} != configured {self.config.input_shape}")
        return x

    def forward(self, x, task_id, record: bool = True) -> np.ndarray:
        """Logits of ``task_id``'s head. With ``record`` the pass can be back-propagated."""
        head = self.head(task_id)
        x = self._check_input(x)
        tape = [] if record else None
        feats = run_forward(self.layers, x, self.params, tape)
        logits, head_cache = head.forward(feats, self.params)
        self._tape = (task_id, tape, head_cache) if record else None
        return logits

    def forward_with_activations(self, x, task_id, record: bool = False):
        """Return ``(logits, ActivationSummary)`` for a batch."""
        head = self.head(task_id)
        x = self._check_input(x)
        taps: dict[str, np.ndarray] = {}
        tape = [] if record else None
        feats = run_forward(self.layers, x, self.params, tape, taps)
        logits, head_cache = head.forward(feats, self.params)
        self._tape = (task_id, tape, head_cache) if record else None
        summary = {}
        for nl in self.topology:
            a = taps[nl.name]
            summary[nl.name] = global_avg_pool(a) if a.ndim == 4 else a
        if self.config.head_relu_importance:
            summary["head"] = relu(logits)
        return logits, ActivationSummary(summary)

    def backward(self, grad_logits) -> GradientSet:
        """Gradients of trunk and current-head parameters for the last recorded forward."""
        if self._tape is None:
            raise StateError("backward called before a recorded forward pass")
        task_id, tape, head_cache = self._tape
        head = self.heads[task_id]
        grads: GradientSet = {}
        g, hg = head.backward(grad_logits, head_cache, self.params)
        grads.update(hg)
        run_backward(self.layers, tape, g, self.params, grads)
        return grads

    def predict(self, x, task_id, batch_size: int = 1024) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size], task_id, record=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "heads": [[str(t), repr(t), h.n_out] for t, h in self.heads.items()],
            "ids": sorted(self.params),
        }
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "MultiHeadNetwork":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
            net = cls(NetworkConfig(**meta["config"]))
            for _, rep, classes in meta["heads"]:
                net.add_head(_parse_task_id(rep), classes)
            for k in meta["ids"]:
                net.params[k] = z[f"p:{k}"].copy()
        return net


def _parse_task_id(rep: str):
    try:
        return int(rep)
    except ValueError:
        return rep.strip("'\"")


def build_network(config: NetworkConfig) -> MultiHeadNetwork:
    return MultiHeadNetwork(config)


def add_head(net: MultiHeadNetwork, task_id, classes: int) -> MultiHeadNetwork:
    return net.add_head(task_id, classes)


def forward_with_activations(net: MultiHeadNetwork, batch, task_id):
    return net.forward_with_activations(batch, task_id)


def reinitialize_trunk(net: MultiHeadNetwork, seed: int) -> MultiHeadNetwork:
    return net.reinitialize_trunk(seed)
