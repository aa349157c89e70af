"""Top-down structure learning of class-partitioned Gaussian SPNs.

The recursion follows the LearnSPN scheme: split columns into groups that look
mutually independent, otherwise split rows with k-means, and stop at single
columns or small row counts.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circuit import SIGMA_FLOOR, Circuit, CircuitBuilder


class LearningError(Exception):
    pass


@dataclass
class LatentTable:
    rows: np.ndarray
    labels: np.ndarray
    column_ids: tuple[int, ...] | None = None
    group_ids: np.ndarray | None = None
    num_classes: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim == 1:
            self.rows = self.rows.reshape(0, 0) if self.rows.size == 0 else self.rows[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.column_ids is None:
            self.column_ids = tuple(range(self.rows.shape[1]))
        self.column_ids = tuple(int(c) for c in self.column_ids)
        if self.group_ids is None:
            self.group_ids = np.arange(len(self.labels), dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        if len(self.labels) != self.rows.shape[0] or len(self.group_ids) != len(self.labels):
            raise ValueError("rows, labels and group_ids must have equal length")
        if len(set(self.column_ids)) != len(self.column_ids):
            raise ValueError("column_ids must be unique")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dimension(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class LearnConfig:
    independence_threshold: float = 0.3
    min_instances: int = 30
    num_row_clusters: int = 2
    seed: int = 0
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if not 0.0 < self.independence_threshold < 1.0:
            raise ValueError("independence_threshold must lie in (0, 1)")
        if self.min_instances < 1:
            raise ValueError("min_instances must be positive")
        if self.num_row_clusters < 2:
            raise ValueError("num_row_clusters must be at least 2")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")


def _require_finite(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite entries")


def independence_components(data: np.ndarray, threshold: float) -> list[list[int]]:
    """Connected components of the graph linking columns with |pearson| >= threshold.

    Zero-variance columns are never linked.
    """
    data = np.asarray(data, dtype=float)
    _require_finite(data)
    if data.shape[0] < 2:
        raise ValueError("need at least two rows to estimate correlations")
    d = data.shape[1]
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    live = norms > 1e-12 * max(1.0, float(np.abs(data).max()))
    corr = np.zeros((d, d))
    if live.any():
        c = centered[:, live] / norms[live]
        corr[np.ix_(live, live)] = c.T @ c
    adjacent = np.abs(corr) >= threshold
    np.fill_diagonal(adjacent, False)

    components = []
    seen = np.zeros(d, dtype=bool)
    for start in range(d):
        if seen[start]:
            continue
        seen[start] = True
        comp, frontier = [start], [start]
        while frontier:
            j = frontier.pop()
            for k in np.flatnonzero(adjacent[j] & ~seen):
                seen[k] = True
                comp.append(int(k))
                frontier.append(int(k))
        components.append(sorted(comp))
    return components


@dataclass
class Clustering:
    assignments: np.ndarray
    proportions: np.ndarray
    centroids: np.ndarray
    iterations: int


def cluster_rows(data: np.ndarray, k: int, seed: int, max_iter: int = 100,
                 tol: float = 1e-6) -> Clustering:
    """Seeded k-means with k-means++ initialization.

    Empty clusters are re-seeded from the point farthest from its centroid.
    """
    data = np.asarray(data, dtype=float)
    _require_finite(data)
    n = data.shape[0]
    if n < k:
        raise LearningError(f"cannot form {k} clusters from {n} rows")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    closest = ((data - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else int(rng.integers(n))
        centroids[j] = data[idx]
        closest = np.minimum(closest, ((data - centroids[j]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.intp)
    it = 0
    for it in range(1, max_iter + 1):
        dist = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        new = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = data[assign == j].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(n), assign]))
                new[j] = data[far]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    dist = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(dist, axis=1)
    proportions = np.bincount(assign, minlength=k) / n
    return Clustering(assign, proportions, centroids, it)


class _Learner:
    def __init__(self, config: LearnConfig, column_ids: tuple[int, ...], dimension: int):
        self.config = config
        self.column_ids = column_ids
        self.builder = CircuitBuilder(dimension)
        self._calls = itertools.count()

    def leaf(self, data: np.ndarray, col: int) -> int:
        x = data[:, col]
        std = max(float(x.std()), self.config.sigma_floor)
        return self.builder.leaf(self.column_ids[col], float(x.mean()), std)

    def factorized(self, data: np.ndarray, cols: list[int]) -> int:
        leaves = [self.leaf(data, c) for c in cols]
        return leaves[0] if len(leaves) == 1 else self.builder.product(leaves)

    def learn(self, data: np.ndarray, cols: list[int]) -> int:
        cfg = self.config
        if len(cols) == 1:
            return self.leaf(data, cols[0])
        if data.shape[0] < max(cfg.min_instances, 2):
            return self.factorized(data, cols)

        comps = independence_components(data[:, cols], cfg.independence_threshold)
        if len(comps) > 1:
            children = [self.learn(data, [cols[i] for i in comp]) for comp in comps]
            return self.builder.product(children)

        if data.shape[0] < cfg.num_row_clusters:
            return self.factorized(data, cols)
        seed = (cfg.seed, next(self._calls))
        clustering = cluster_rows(data[:, cols], cfg.num_row_clusters,
                                  seed=np.random.SeedSequence(seed).generate_state(1)[0])
        groups = [np.flatnonzero(clustering.assignments == j)
                  for j in range(cfg.num_row_clusters)]
        groups = [g for g in groups if len(g)]
        if len(groups) < 2:
            return self.factorized(data, cols)
        children = [self.learn(data[g], cols) for g in groups]
        weights = np.array([len(g) for g in groups], dtype=float) / data.shape[0]
        return self.builder.sum(children, weights)


def learn_spn(table: LatentTable, config: LearnConfig = LearnConfig()) -> Circuit:
    """Learn a circuit whose root splits on class, with class priors = frequencies."""
    rows = table.rows
    _require_finite(rows)
    if len(table) == 0 or table.dimension == 0:
        raise ValueError("latent table is empty")
    d = table.dimension
    if sorted(table.column_ids) != list(range(d)):
        raise ValueError("column_ids must be a permutation of 0..d-1")
    num_classes = table.num_classes
    if np.any(table.labels < 0) or np.any(table.labels >= num_classes):
        raise ValueError("labels out of range")
    learner = _Learner(config, table.column_ids, d)
    children, priors = [], []
    for k in range(num_classes):
        members = rows[table.labels == k]
        if len(members) == 0:
            raise LearningError(f"class {k} has no rows")
        children.append(learner.learn(members, list(range(d))))
        priors.append(len(members) / len(table))
    root = learner.builder.sum(children, priors)
    return learner.builder.build(root)


def factorized_gaussian(table: LatentTable, sigma_floor: float = SIGMA_FLOOR) -> Circuit:
    """Single fully factorized Gaussian over all columns (a likelihood baseline)."""
    learner = _Learner(LearnConfig(sigma_floor=sigma_floor), table.column_ids, table.dimension)
    root = learner.factorized(table.rows, list(range(table.dimension)))
    return learner.builder.build(root)


# --------------------------------------------------------------------------
# latent CSV


def write_latents_csv(table: LatentTable, path: str | Path) -> None:
    d = table.dimension
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{i}" for i in range(d)] + ["label", "group_id"])
        for row, label, group in zip(table.rows, table.labels, table.group_ids):
            w.writerow([repr(float(v)) for v in row] + [int(label), int(group)])


def read_latents_csv(path: str | Path, num_classes: int | None = None) -> LatentTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "group_id"]:
            raise ValueError(f"{path}: expected trailing label,group_id columns")
        zcols = header[:-2]
        if zcols != [f"z{i}" for i in range(len(zcols))]:
            raise ValueError(f"{path}: latent columns must be named z0..z{{d-1}}")
        rows, labels, groups = [], [], []
        for rec in reader:
            rows.append([float(v) for v in rec[:-2]])
            labels.append(int(rec[-2]))
            groups.append(int(rec[-1]))
    data = np.array(rows, dtype=float).reshape(len(rows), len(zcols))
    return LatentTable(data, np.array(labels), group_ids=np.array(groups),
                       num_classes=num_classes)
