"""Datasets, task construction and task-order generation."""
from __future__ import annotations

import gzip
import itertools
import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    features: np.ndarray  # [n, *input_shape], float64 in [0, 1]
    labels: np.ndarray  # int64 class indices
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise FormatError(f"{len(self.features)} samples but {len(self.labels)} labels")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.split, self.n_classes)


@dataclass
class TaskSpec:
    """One task of a sequence: a class subset or a pixel permutation of a base dataset.

    Permutation tasks keep a reference to the unpermuted splits and permute on
    access, so many permuted tasks can share one copy of the base data.
    """

    task_id: int
    kind: str  # "classes" | "permutation" | "synthetic"
    base_train: Dataset
    base_test: Dataset
    classes: tuple[int, ...] = ()
    permutation: np.ndarray | None = None
    permutation_seed: int | None = None
    name: str = ""

    @property
    def train(self) -> Dataset:
        return self.base_train if self.permutation is None else apply_permutation(self.base_train, self.permutation)

    @property
    def test(self) -> Dataset:
        return self.base_test if self.permutation is None else apply_permutation(self.base_test, self.permutation)

    @property
    def n_classes(self) -> int:
        return int(self.base_train.n_classes)

    @property
    def identity(self) -> str:
        return self.name or str(self.task_id)


@dataclass
class TaskSequence:
    tasks: list[TaskSpec]
    order_id: int = 0
    seed: int | None = None

    @property
    def order(self) -> list[int]:
        return [t.task_id for t in self.tasks]

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(image_path, label_path, split: str = "train") -> Dataset:
    """Parse big-endian IDX image/label files into an ``[n, 1, 28, 28]`` dataset."""
    images = _parse_idx(_read_bytes(image_path), IDX_IMAGES_MAGIC, 3, image_path)
    labels = _parse_idx(_read_bytes(label_path), IDX_LABELS_MAGIC, 1, label_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    feats = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(feats, labels.astype(np.int64), split, 10)


def load_cifar10_binary(paths, split: str = "train") -> Dataset:
    """Parse CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    feats, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.max() > 9:
        raise FormatError("CIFAR-10 label byte above 9")
    return Dataset(np.concatenate(feats).astype(np.float64) / 255.0, labels, split, 10)


def data_dir(override=None) -> Path:
    return Path(override or os.environ.get("DATA_DIR", "data"))


def load_mnist(root=None) -> tuple[Dataset, Dataset]:
    """Load MNIST train/test from ``root`` (or ``$DATA_DIR``), trying ``root/mnist`` too."""
    base = data_dir(root)
    for cand in (base, base / "mnist", base / "MNIST" / "raw"):
        out = []
        for split, (img, lab) in MNIST_FILES.items():
            for suffix in ("", ".gz"):
                ip, lp = cand / (img + suffix), cand / (lab + suffix)
                if ip.exists() and lp.exists():
                    out.append(load_mnist_idx(ip, lp, split))
                    break
        if len(out) == 2:
            return out[0], out[1]
    raise FileNotFoundError(f"MNIST IDX files not found under {base}")


def load_cifar10(root=None) -> tuple[Dataset, Dataset]:
    base = data_dir(root)
    for cand in (base, base / "cifar-10-batches-bin"):
        train = [cand / f"data_batch_{i}.bin" for i in range(1, 6)]
        test = cand / "test_batch.bin"
        if all(p.exists() for p in train) and test.exists():
            return load_cifar10_binary(train, "train"), load_cifar10_binary([test], "test")
    raise FileNotFoundError(f"CIFAR-10 binary batches not found under {base}")


# ----------------------------------------------------------------------------
# task construction
# ----------------------------------------------------------------------------

def _select_classes(ds: Dataset, classes) -> Dataset:
    lut = np.full(max(int(ds.labels.max()), max(classes)) + 1, -1, dtype=np.int64)
    lut[list(classes)] = np.arange(len(classes))
    mask = np.isin(ds.labels, classes)
    labels = lut[ds.labels[mask]]
    return Dataset(ds.features[mask], labels, ds.split, len(classes))


def split_by_classes(train: Dataset, test: Dataset, groups) -> list[TaskSpec]:
    """One task per class group; labels are remapped to ``0..len(group)-1`` in group order."""
    groups = [tuple(int(c) for c in g) for g in groups]
    seen: set[int] = set()
    for g in groups:
        if not g or len(set(g)) != len(g) or seen & set(g):
            raise ConfigError(f"class groups must be non-empty and disjoint, got {groups}")
        seen |= set(g)
        missing = [c for c in g if c not in set(train.labels.tolist())]
        if missing:
            raise ConfigError(f"classes {missing} absent from the training data")
    return [
        TaskSpec(i, "classes", _select_classes(train, g), _select_classes(test, g), classes=g,
                 name="-".join(map(str, g)))
        for i, g in enumerate(groups)
    ]


def pixel_permutation(n_pixels: int, seed: int | None) -> np.ndarray:
    if seed is None:
        return np.arange(n_pixels)
    return np.random.default_rng(seed).permutation(n_pixels)


def apply_permutation(ds: Dataset, perm: np.ndarray) -> Dataset:
    flat = ds.features.reshape(len(ds), -1)
    if flat.shape[1] != len(perm):
        raise ConfigError(f"permutation of length {len(perm)} does not fit {flat.shape[1]} pixels")
    return Dataset(flat[:, perm].reshape(ds.features.shape), ds.labels, ds.split, ds.n_classes)


def permute_pixels(train: Dataset, test: Dataset, seed: int | None, task_id: int = 0) -> TaskSpec:
    """The same fixed pixel permutation applied to train and test. ``seed=None`` is the identity."""
    perm = pixel_permutation(int(np.prod(train.input_shape)), seed)
    if len(perm) != int(np.prod(test.input_shape)):
        raise ConfigError("train and test inputs differ in size")
    return TaskSpec(task_id, "permutation", train, test, classes=tuple(range(train.n_classes)),
                    permutation=perm, permutation_seed=seed, name=f"perm{task_id}")


def permuted_tasks(train: Dataset, test: Dataset, n_tasks: int, seed: int) -> list[TaskSpec]:
    """First task keeps the original pixel order, as is customary for permuted MNIST."""
    seeds = [None] + [int(s) for s in np.random.SeedSequence(seed).generate_state(n_tasks - 1)]
    return [permute_pixels(train, test, s, i) for i, s in enumerate(seeds)]


def _gaussian_split(rng, means, n, split):
    classes, dims = means.shape
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    feats = means[labels] + rng.standard_normal((n, dims))
    return Dataset(feats, labels, split, classes)


def synthetic_gaussian_tasks(n_tasks: int = 5, dims: int = 20, classes_per_task: int = 2,
                             n_train: int = 500, n_test: int = 200, seed: int = 0,
                             spread: float = 4.0) -> list[TaskSpec]:
    """Tasks of unit-variance Gaussian clusters.

    Each task draws a random orthonormal frame; class means sit on its first
    ``classes_per_task`` axes, centred on the origin, with pairwise distance
    ``spread`` (in units of the noise std). Different tasks therefore use
    different directions of the same input space.
    """
    if min(n_tasks, dims, classes_per_task, n_train, n_test) <= 0:
        raise ConfigError("synthetic task counts must be positive")
    if classes_per_task > dims:
        raise ConfigError("classes_per_task cannot exceed dims")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        q, _ = np.linalg.qr(rng.standard_normal((dims, dims)))
        means = q[:, :classes_per_task].T * (spread / math.sqrt(2.0))
        means -= means.mean(axis=0)
        tasks.append(TaskSpec(t, "synthetic", _gaussian_split(rng, means, n_train, "train"),
                              _gaussian_split(rng, means, n_test, "test"),
                              classes=tuple(range(classes_per_task)), name=f"syn{t}"))
    return tasks


def synthetic_image_tasks(n_tasks: int = 1, size: int = 16, n_train: int = 400, n_test: int = 200,
                          seed: int = 0, noise: float = 0.1) -> list[TaskSpec]:
    """Two-class single-channel images: a bright horizontal vs. vertical bar at a random offset."""
    rng = np.random.default_rng(seed)

    def make(n, split):
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        imgs = noise * rng.random((n, 1, size, size))
        for i, y in enumerate(labels):
            pos = rng.integers(2, size - 2)
            lo, hi = sorted(rng.integers(0, size, 2))
            hi = max(hi, lo + size // 3)
            if y == 0:
                imgs[i, 0, pos - 1:pos + 1, lo:hi] = 1.0
            else:
                imgs[i, 0, lo:hi, pos - 1:pos + 1] = 1.0
        return Dataset(np.clip(imgs, 0.0, 1.0), labels, split, 2)

    return [TaskSpec(t, "synthetic", make(n_train, "train"), make(n_test, "test"), classes=(0, 1),
                     name=f"img{t}") for t in range(n_tasks)]


def limit_samples(task: TaskSpec, n_train: int | None = None, n_test: int | None = None, seed: int = 0) -> TaskSpec:
    """Deterministic random subsample of a task's splits."""
    rng = np.random.default_rng([seed, task.task_id])
    train, test = task.base_train, task.base_test
    if n_train is not None and n_train < len(train):
        train = train.subset(np.sort(rng.permutation(len(train))[:n_train]))
    if n_test is not None and n_test < len(test):
        test = test.subset(np.sort(rng.permutation(len(test))[:n_test]))
    return replace(task, base_train=train, base_test=test)


# ----------------------------------------------------------------------------
# orders
# ----------------------------------------------------------------------------

def shuffle_orders(tasks: list[TaskSpec], n_orders: int | None = None, seed: int = 0,
                   exhaustive: bool = False, unique: bool = False,
                   pin_first: int | None = None) -> list[TaskSequence]:
    """Task orders to evaluate.

    ``exhaustive`` enumerates every permutation in lexicographic order of task
    position. Otherwise ``n_orders`` permutations are sampled from ``seed``;
    ``unique`` forbids repeats. ``pin_first`` keeps that task id in front.
    """
    tasks = list(tasks)
    head: list[TaskSpec] = []
    if pin_first is not None:
        head = [t for t in tasks if t.task_id == pin_first]
        if not head:
            raise ConfigError(f"pinned task {pin_first} is not in the task set")
        tasks = [t for t in tasks if t.task_id != pin_first]
    total = math.factorial(len(tasks))

    if exhaustive:
        perms = list(itertools.permutations(range(len(tasks))))
        if n_orders is not None and n_orders > total:
            raise ConfigError(f"requested {n_orders} orders but only {total} exist")
    else:
        if n_orders is None or n_orders < 1:
            raise ConfigError("n_orders must be a positive integer")
        if unique and n_orders > total:
            raise ConfigError(f"cannot draw {n_orders} unique orders from {total}")
        rng = np.random.default_rng(seed)
        perms, seen = [], set()
        while len(perms) < n_orders:
            p = tuple(int(i) for i in rng.permutation(len(tasks)))
            if unique and p in seen:
                continue
            seen.add(p)
            perms.append(p)
    return [TaskSequence(head + [tasks[i] for i in p], order_id=k, seed=seed) for k, p in enumerate(perms)]
