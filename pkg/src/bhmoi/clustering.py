"""Overlap-based clustering of gridded densities.

Partitions are scored with the overlapping clustering index (OCI) and found
with a power-weighted K-Means over the total variation distance. Within-cluster
homogeneity is summarized by the overlapping borrowing index (OBI), the mean
pairwise overlap of the members.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .density import GriddedDensity, stack_values

__all__ = [
    "WeightMode",
    "ClusteringConfig",
    "ClusterPartition",
    "ClusteringResult",
    "LloydRun",
    "canonical_labels",
    "oci_score",
    "obi_score",
    "wkm_objective",
    "lloyd_run",
    "weighted_kmeans",
    "partition_path",
    "select_partition",
    "optimal_partition",
    "sweep_a",
    "set_partitions",
    "stirling2",
    "brute_force_best_partition",
    "ovl_matrix",
]

BRUTE_FORCE_MAX_N = 12
TIE_TOL = 1e-12


class WeightMode(str, enum.Enum):
    UNIFORM = "uniform"
    PROPORTIONAL = "proportional"


@dataclass(frozen=True)
class ClusteringConfig:
    a: float = 0.5
    b: float = 1.0
    weight_mode: WeightMode = WeightMode.UNIFORM
    k_min: int = 1
    k_max: int | None = None
    restarts: int = 20
    max_iterations: int = 100
    seed: int = 12345

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        if not 0 < self.a <= 1:
            raise ValueError(f"a must lie in (0, 1], got {self.a}")
        if self.b < 1:
            raise ValueError(f"b must be >= 1, got {self.b}")
        if self.restarts < 1 or self.max_iterations < 1:
            raise ValueError("restarts and max_iterations must be positive")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.k_max is not None and self.k_max < self.k_min:
            raise ValueError("empty k range")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def k_range(self, n: int) -> range:
        k_max = n if self.k_max is None else self.k_max
        if self.k_min > n or k_max > n:
            raise ValueError(f"k range [{self.k_min}, {k_max}] exceeds n={n}")
        if k_max < self.k_min:
            raise ValueError("empty k range")
        return range(self.k_min, k_max + 1)


def canonical_labels(labels: Sequence[int]) -> tuple[int, ...]:
    """Relabel clusters in order of first appearance."""
    mapping: dict[int, int] = {}
    out = []
    for lab in labels:
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out.append(mapping[lab])
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ClusterPartition:
    assignments: tuple[int, ...]
    K: int
    cluster_means: tuple[GriddedDensity, ...]
    cluster_sizes: tuple[int, ...]

    @classmethod
    def from_assignments(cls, densities: Sequence[GriddedDensity], assignments: Sequence[int]) -> "ClusterPartition":
        labels = canonical_labels([int(x) for x in assignments])
        if len(labels) != len(densities):
            raise ValueError("partition does not match the number of densities")
        grid, F = stack_values(densities)
        K = max(labels) + 1
        lab = np.asarray(labels)
        sizes = tuple(int(np.sum(lab == m)) for m in range(K))
        means = tuple(
            densities[int(np.flatnonzero(lab == m)[0])] if sizes[m] == 1
            else GriddedDensity(grid, F[lab == m].mean(axis=0))
            for m in range(K)
        )
        return cls(labels, K, means, sizes)

    @property
    def n(self) -> int:
        return len(self.assignments)

    def members(self, m: int) -> list[int]:
        return [i for i, lab in enumerate(self.assignments) if lab == m]

    def clusters(self) -> list[list[int]]:
        return [self.members(m) for m in range(self.K)]

    def same_as(self, other: "ClusterPartition | Sequence[int]") -> bool:
        other_labels = getattr(other, "assignments", other)
        return canonical_labels(other_labels) == self.assignments


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    partition: ClusterPartition
    oci: float
    oci_by_k: dict[int, float]
    obi: tuple[float, ...]
    wkm_objective: float
    a: float
    weight_mode: WeightMode
    partitions_by_k: dict[int, ClusterPartition] = field(default_factory=dict, repr=False)


def _labels_of(partition: ClusterPartition | Sequence[int], n: int) -> np.ndarray:
    labels = np.asarray(getattr(partition, "assignments", partition), dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"partition has {labels.size} labels for {n} densities")
    if labels.min() < 0:
        raise ValueError("negative cluster index")
    K = int(labels.max()) + 1
    if np.any(np.bincount(labels, minlength=K) == 0):
        raise ValueError("partition has an empty cluster")
    return labels


def _cluster_weights(sizes: np.ndarray, mode: WeightMode) -> np.ndarray:
    K = sizes.shape[-1]
    if mode is WeightMode.UNIFORM:
        return np.full(sizes.shape, 1.0 / K)
    return sizes / sizes.sum(axis=-1, keepdims=True)


def _centroid_overlaps(F: np.ndarray, w: np.ndarray, labels: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Cluster sizes and OVL(g_m, f_i) for every density against every cluster mean."""
    onehot = np.zeros((K, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    sizes = onehot.sum(axis=1)
    means = (onehot @ F) / sizes[:, None]
    overlaps = np.minimum(means[:, None, :], F[None, :, :]) @ w
    return sizes, np.clip(overlaps, 0.0, 1.0)


def _own_overlap(F, w, labels, K):
    sizes, overlaps = _centroid_overlaps(F, w, labels, K)
    return sizes, overlaps[labels, np.arange(labels.size)]


def _oci(F, w, labels, a, mode) -> float:
    K = int(labels.max()) + 1
    sizes, own = _own_overlap(F, w, labels, K)
    p = _cluster_weights(sizes, mode)
    return float(np.sum(p[labels] ** a * own))


def _wkm(F, w, labels, b, mode) -> float:
    K = int(labels.max()) + 1
    sizes, own = _own_overlap(F, w, labels, K)
    p = _cluster_weights(sizes, mode)
    return float(np.sum((1.0 - p[labels]) ** b * (1.0 - own)))


def oci_score(densities: Sequence[GriddedDensity], partition, a: float, weight_mode=WeightMode.UNIFORM) -> float:
    """Sum over clusters of p_m^a times the members' overlap with the cluster mean."""
    if not 0 < a <= 1:
        raise ValueError(f"a must lie in (0, 1], got {a}")
    grid, F = stack_values(densities)
    return _oci(F, grid.weights, _labels_of(partition, len(densities)), a, WeightMode(weight_mode))


def wkm_objective(densities: Sequence[GriddedDensity], partition, b: float = 1.0, weight_mode=WeightMode.UNIFORM) -> float:
    """Sum over clusters of (1 - p_m)^b times the members' TV distance to the cluster mean."""
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    grid, F = stack_values(densities)
    return _wkm(F, grid.weights, _labels_of(partition, len(densities)), b, WeightMode(weight_mode))


def ovl_matrix(densities: Sequence[GriddedDensity]) -> np.ndarray:
    grid, F = stack_values(densities)
    out = np.minimum(F[:, None, :], F[None, :, :]) @ grid.weights
    return np.clip(out, 0.0, 1.0)


def obi_score(densities: Sequence[GriddedDensity], member_indices: Sequence[int]) -> float:
    """Mean pairwise overlap among the members; 0 for a singleton."""
    idx = sorted(int(i) for i in member_indices)
    if not idx:
        raise ValueError("empty cluster")
    if idx[0] < 0 or idx[-1] >= len(densities):
        raise ValueError("member index out of range")
    if len(idx) == 1:
        return 0.0
    grid, F = stack_values([densities[i] for i in idx])
    pair = np.minimum(F[:, None, :], F[None, :, :]) @ grid.weights
    iu = np.triu_indices(len(idx), k=1)
    return float(min(1.0, max(0.0, pair[iu].mean())))


@dataclass
class LloydRun:
    labels: np.ndarray
    objective: float
    history: list[float]
    iterations: int


def _kmeanspp_seeds(D: np.ndarray, K: int, rng: np.random.Generator) -> list[int]:
    n = D.shape[0]
    seeds = [int(rng.integers(n))]
    closest = D[seeds[0]].copy()
    for _ in range(1, K):
        d2 = closest**2
        d2[seeds] = 0.0
        total = d2.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in seeds]
            nxt = int(remaining[rng.integers(len(remaining))])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        seeds.append(nxt)
        closest = np.minimum(closest, D[nxt])
    return seeds


def _repair_empty(labels: np.ndarray, dist_to_own: np.ndarray, K: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        sizes = np.bincount(labels, minlength=K)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return labels
        movable = sizes[labels] >= 2
        cand = np.where(movable, dist_to_own, -np.inf)
        i = int(np.argmax(cand))
        labels[i] = int(empty[0])
        dist_to_own = dist_to_own.copy()
        dist_to_own[i] = -np.inf


def _assign(F, w, labels, K, b, mode) -> tuple[np.ndarray, np.ndarray]:
    sizes, overlaps = _centroid_overlaps(F, w, labels, K)
    p = _cluster_weights(sizes, mode)
    cost = ((1.0 - p) ** b)[:, None] * (1.0 - overlaps)
    new = np.argmin(cost, axis=0)  # ties go to the lowest cluster index
    return new, 1.0 - overlaps[new, np.arange(labels.size)]


def lloyd_run(
    F: np.ndarray,
    w: np.ndarray,
    K: int,
    b: float,
    mode: WeightMode,
    rng: np.random.Generator,
    max_iterations: int = 100,
    D: np.ndarray | None = None,
) -> LloydRun:
    """One seeded run of the weighted K-Means alternation.

    A step is kept only if it lowers the objective, so the recorded history is
    strictly decreasing; the mixture mean is not the total-variation minimizer,
    and an unguarded Lloyd step can move uphill.
    """
    n = F.shape[0]
    if D is None:
        D = 1.0 - np.clip(np.minimum(F[:, None, :], F[None, :, :]) @ w, 0.0, 1.0)
    seeds = _kmeanspp_seeds(D, K, rng)
    labels = np.argmin(D[seeds], axis=0)
    labels[seeds] = np.arange(K)
    labels = _repair_empty(labels, D[np.asarray(seeds)[labels], np.arange(n)], K)
    obj = _wkm(F, w, labels, b, mode)
    history = [obj]
    it = 0
    for it in range(1, max_iterations + 1):
        new, dist = _assign(F, w, labels, K, b, mode)
        new = _repair_empty(new, dist, K)
        if np.array_equal(new, labels):
            break
        new_obj = _wkm(F, w, new, b, mode)
        if not new_obj < obj - TIE_TOL:
            break
        labels, obj = new, new_obj
        history.append(obj)
    return LloydRun(labels, obj, history, it)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _best_of_restarts(F, w, K, config: ClusteringConfig, D) -> tuple[tuple[int, ...], float]:
    n = F.shape[0]
    if K == 1:
        labels = np.zeros(n, dtype=np.int64)
        return canonical_labels(labels.tolist()), _wkm(F, w, labels, config.b, config.weight_mode)
    if K == n:
        labels = np.arange(n)
        return canonical_labels(labels.tolist()), _wkm(F, w, labels, config.b, config.weight_mode)
    best: tuple[float, tuple[int, ...]] | None = None
    for r in range(config.restarts):
        run = lloyd_run(F, w, K, config.b, config.weight_mode, _stream(config.seed, K, r), config.max_iterations, D)
        cand = (run.objective, canonical_labels(run.labels.tolist()))
        if best is None or cand[0] < best[0] - TIE_TOL or (abs(cand[0] - best[0]) <= TIE_TOL and cand[1] < best[1]):
            best = cand
    assert best is not None
    return best[1], best[0]


def weighted_kmeans(densities: Sequence[GriddedDensity], K: int, config: ClusteringConfig | None = None) -> ClusterPartition:
    """Best-of-restarts weighted K-Means partition into exactly ``K`` clusters."""
    config = config or ClusteringConfig()
    n = len(densities)
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    grid, F = stack_values(densities)
    D = 1.0 - ovl_matrix(densities)
    labels, _ = _best_of_restarts(F, grid.weights, K, config, D)
    return ClusterPartition.from_assignments(densities, labels)


def partition_path(densities: Sequence[GriddedDensity], config: ClusteringConfig | None = None) -> dict[int, ClusterPartition]:
    """Weighted K-Means partition for every K in the configured range.

    The K-Means objective does not involve ``a``, so one path serves a whole
    sweep over ``a``.
    """
    config = config or ClusteringConfig()
    n = len(densities)
    grid, F = stack_values(densities)
    D = 1.0 - ovl_matrix(densities)
    path = {}
    for K in config.k_range(n):
        labels, _ = _best_of_restarts(F, grid.weights, K, config, D)
        path[K] = ClusterPartition.from_assignments(densities, labels)
    return path


def select_partition(
    densities: Sequence[GriddedDensity],
    path: dict[int, ClusterPartition],
    a: float,
    weight_mode=WeightMode.UNIFORM,
    b: float = 1.0,
) -> ClusteringResult:
    """Pick the K with the largest OCI at exponent ``a``; ties go to the smaller K."""
    if not path:
        raise ValueError("empty k range")
    mode = WeightMode(weight_mode)
    oci_by_k = {K: oci_score(densities, part, a, mode) for K, part in sorted(path.items())}
    best_k = None
    for K, val in oci_by_k.items():
        if best_k is None or val > oci_by_k[best_k] + TIE_TOL:
            best_k = K
    part = path[best_k]
    obi = tuple(obi_score(densities, part.members(m)) for m in range(part.K))
    return ClusteringResult(
        partition=part,
        oci=oci_by_k[best_k],
        oci_by_k=oci_by_k,
        obi=obi,
        wkm_objective=wkm_objective(densities, part, b, mode),
        a=a,
        weight_mode=mode,
        partitions_by_k=dict(path),
    )


def optimal_partition(densities: Sequence[GriddedDensity], config: ClusteringConfig | None = None) -> ClusteringResult:
    config = config or ClusteringConfig()
    path = partition_path(densities, config)
    return select_partition(densities, path, config.a, config.weight_mode, config.b)


def sweep_a(densities, a_values: Sequence[float], config: ClusteringConfig | None = None) -> list[ClusteringResult]:
    config = config or ClusteringConfig()
    path = partition_path(densities, config)
    return [select_partition(densities, path, a, config.weight_mode, config.b) for a in a_values]


def stirling2(n: int, k: int) -> int:
    """Number of ways to partition n labelled items into k non-empty blocks."""
    if n == k:
        return 1
    if k == 0 or k > n:
        return 0
    return sum((-1) ** j * math.comb(k, j) * (k - j) ** n for j in range(k + 1)) // math.factorial(k)


def set_partitions(n: int, K: int) -> Iterator[tuple[int, ...]]:
    """Restricted-growth strings of length n with exactly K blocks, in lexicographic order."""
    labels = [0] * n

    def rec(i: int, used: int):
        if n - i < K - used:
            return
        if i == n:
            if used == K:
                yield tuple(labels)
            return
        for lab in range(min(used + 1, K)):
            labels[i] = lab
            yield from rec(i + 1, max(used, lab + 1))

    if n == 0 or K < 1 or K > n:
        return
    labels[0] = 0
    yield from rec(1, 1)


def brute_force_best_partition(
    densities: Sequence[GriddedDensity],
    K: int,
    a: float = 1.0,
    weight_mode=WeightMode.UNIFORM,
    objective: str = "oci",
    b: float = 1.0,
) -> ClusterPartition:
    """Exhaustive search over all K-partitions.

    ``objective="oci"`` maximizes OCI at exponent ``a``; ``objective="wkm"``
    minimizes the weighted K-Means objective at power ``b``. Near-ties within
    1e-12 go to the lexicographically smallest assignment vector.
    """
    n = len(densities)
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError("instance too large for exhaustive search")
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    mode = WeightMode(weight_mode)
    grid, F = stack_values(densities)
    cands = np.array(list(set_partitions(n, K)), dtype=np.int64)
    scores = _batch_scores(F, grid.weights, cands, K, mode, a, b, objective)
    best = scores.max()
    winner = int(np.flatnonzero(scores >= best - TIE_TOL)[0])
    return ClusterPartition.from_assignments(densities, cands[winner].tolist())


def _batch_scores(F, w, cands, K, mode, a, b, objective) -> np.ndarray:
    """Objective for each row of ``cands``, signed so that larger is better."""
    P, n = cands.shape
    out = np.empty(P)
    chunk = max(1, 200_000 // (n * F.shape[1]))
    rows = np.arange(n)
    for s in range(0, P, chunk):
        lab = cands[s : s + chunk]
        onehot = np.zeros((lab.shape[0], K, n))
        onehot[np.arange(lab.shape[0])[:, None], lab, rows[None, :]] = 1.0
        sizes = onehot.sum(axis=2)
        means = (onehot @ F) / sizes[:, :, None]
        own = np.take_along_axis(means, lab[:, :, None], axis=1)
        ov = np.clip(np.minimum(own, F[None]) @ w, 0.0, 1.0)
        p = _cluster_weights(sizes, mode)
        pm = np.take_along_axis(p, lab, axis=1)
        if objective == "oci":
            out[s : s + chunk] = np.sum(pm**a * ov, axis=1)
        elif objective == "wkm":
            out[s : s + chunk] = -np.sum((1.0 - pm) ** b * (1.0 - ov), axis=1)
        else:
            raise ValueError(f"unknown objective {objective!r}")
    return out
