"""Order-robustness metrics: learning-step average accuracy (LA) and degree of interference (DOI).

Positions and learning steps are 1-based in the public functions, matching
how results are reported (task 1 is the first task learned).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError


class AccuracyMatrix:
    """Triangular grid: ``values[k, j]`` is accuracy (%) of task k after learning step j (0-based, defined for k <= j)."""

    def __init__(self, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ContractError(f"accuracy matrix must be square, got {values.shape}")
        defined = np.triu(np.ones(values.shape, dtype=bool))  # k <= j
        cells = values[defined]
        if np.any(np.isnan(cells)) or np.any((cells < 0) | (cells > 100)):
            raise ContractError("defined accuracy cells must lie in [0, 100]")
        values[~defined] = np.nan
        self.values = values

    @classmethod
    def empty(cls, n: int) -> "AccuracyMatrix":
        m = cls.__new__(cls)
        m.values = np.full((n, n), np.nan)
        return m

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.values, other.values, equal_nan=True)

    def cells(self):
        """Yield ``(task, step, accuracy)`` 0-based for every defined cell, step-major."""
        for j in range(self.n):
            for k in range(j + 1):
                yield k, j, float(self.values[k, j])

    def __repr__(self):
        return f"AccuracyMatrix({self.values!r})"


def la_accuracy(matrix: AccuracyMatrix, k: int) -> float:
    """Mean accuracy over tasks 1..k after learning step k."""
    if not 1 <= k <= matrix.n:
        raise IndexError(f"learning step {k} outside 1..{matrix.n}")
    return float(np.mean(matrix.values[:k, k - 1]))


def doi(matrix: AccuracyMatrix, k: int) -> float:
    """Accuracy of task k right after learning it minus its accuracy after the last step."""
    n = matrix.n
    if k == n:
        raise UndefinedMetricError("DOI is undefined for the last task")
    if not 1 <= k < n:
        raise IndexError(f"task position {k} outside 1..{n - 1}")
    return float(matrix.values[k - 1, k - 1] - matrix.values[k - 1, n - 1])


@dataclass
class RunRecord:
    order_id: int
    repeat: int
    order: list  # absolute position -> task identity
    matrix: AccuracyMatrix
    config_digest: str = ""
    seed: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if len(self.order) != self.matrix.n:
            raise ContractError("task order length does not match the accuracy matrix")


@dataclass
class AggregateReport:
    """Mean and population std per absolute task position, over all records."""

    n_tasks: int
    count: int
    la_mean: list[float] = field(default_factory=list)
    la_std: list[float] = field(default_factory=list)
    doi_mean: list[float] = field(default_factory=list)
    doi_std: list[float] = field(default_factory=list)
    final_mean: float = 0.0
    final_std: float = 0.0

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "count": self.count,
            "la_mean": self.la_mean,
            "la_std": self.la_std,
            "doi_mean": self.doi_mean,
            "doi_std": self.doi_std,
            "final_mean": self.final_mean,
            "final_std": self.final_std,
        }


def aggregate_over_orders(records) -> AggregateReport:
    """Uniformly weighted mean/std of LA_k (k=1..n) and DOI_k (k=1..n-1) over records."""
    records = list(records)
    if not records:
        raise ContractError("nothing to aggregate")
    dims = {r.matrix.n for r in records}
    if len(dims) != 1:
        raise ContractError(f"records have mixed task counts {sorted(dims)}")
    n = dims.pop()
    la = np.array([[la_accuracy(r.matrix, k) for k in range(1, n + 1)] for r in records])
    di = np.array([[doi(r.matrix, k) for k in range(1, n)] for r in records]).reshape(len(records), n - 1)
    return AggregateReport(
        n_tasks=n,
        count=len(records),
        la_mean=la.mean(axis=0).tolist(),
        la_std=la.std(axis=0).tolist(),
        doi_mean=di.mean(axis=0).tolist() if n > 1 else [],
        doi_std=di.std(axis=0).tolist() if n > 1 else [],
        final_mean=float(la[:, -1].mean()),
        final_std=float(la[:, -1].std()),
    )
