"""Acceptance gate: one marked test group per numbered criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line per criterion.
"""

import time
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest
import sympy
from scipy import stats

from bhmoi.clustering import (
    ClusteringConfig,
    WeightMode,
    brute_force_best_partition,
    canonical_labels,
    obi_score,
    oci_score,
    sweep_a,
    weighted_kmeans,
)
from bhmoi.density import GriddedDensity, SupportGrid, ovl
from bhmoi.engine import HierPriorConfig, McmcConfig, run_bhmoi_binary
from bhmoi.fixtures import SARCOMA_HIGH, load_fixture
from bhmoi.formats import dump_json, fit_document, study_document
from bhmoi.trialsim import SCENARIOS, run_study, resolve_workers

from conftest import normal_density, random_densities

SEED = 12345
A_GRID = [round(0.05 * i, 2) for i in range(1, 21)]


def random_partition(rng, n):
    return canonical_labels(rng.integers(0, n, n).tolist())


# ---------------------------------------------------------------- shared runs


@lru_cache(maxsize=None)
def heterogeneous_fit():
    """Swept-a three-cluster fit of the heterogeneous ten-subgroup fixture."""
    trial = load_fixture("heterogeneous10")
    prior = HierPriorConfig(noninf_tau=0.01)
    mcmc = McmcConfig.reporting(SEED)
    first = run_bhmoi_binary(trial, ClusteringConfig(a=A_GRID[0], seed=SEED), prior, mcmc)
    sweep = sweep_a(first.densities, A_GRID, ClusteringConfig(seed=SEED))
    a3 = [r.a for r in sweep if r.partition.K == 3]
    assert a3, f"no a in the sweep gives three clusters: {[(r.a, r.partition.K) for r in sweep]}"
    return run_bhmoi_binary(trial, ClusteringConfig(a=a3[0], seed=SEED), prior, mcmc)


@lru_cache(maxsize=None)
def sarcoma_fit(a):
    prior = HierPriorConfig(beta=10.0, alpha_max=100.0)
    return run_bhmoi_binary(load_fixture("sarcoma"), ClusteringConfig(a=a, seed=SEED), prior, McmcConfig.reporting(SEED))


def _scenario6_independent():
    return run_study([SCENARIOS[6]], ["independent"], reps=2000, seed=SEED, workers=resolve_workers())


def _table_study():
    specs = [SCENARIOS[1], SCENARIOS[2], SCENARIOS[6]]
    return run_study(specs, ["bhmoi", "independent", "oracle"], reps=500, seed=SEED, workers=resolve_workers())


scenario6_independent = lru_cache(maxsize=None)(_scenario6_independent)
table_study = lru_cache(maxsize=None)(_table_study)


# ---------------------------------------------------------------- 1


@pytest.mark.criterion(1, "OVL analytic accuracy")
def test_ovl_standard_normals():
    start = time.perf_counter()
    grid = SupportGrid(-6.0, 7.0, 512)
    value = ovl(normal_density(grid, 0.0), normal_density(grid, 1.0))
    elapsed = time.perf_counter() - start
    assert 2 * stats.norm.cdf(-0.5) == pytest.approx(0.61708, abs=5e-6)
    assert abs(value - 0.61708) <= 1e-3
    assert elapsed < 1.0


# ---------------------------------------------------------------- 2


@pytest.mark.criterion(2, "OCI bounds")
class TestOciBounds:
    def test_unit_exponent(self):
        start = time.perf_counter()
        rng = np.random.default_rng(2)
        grid = SupportGrid(0.0, 10.0, 128)
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            ds = random_densities(rng, n, grid)
            labels = random_partition(rng, n)
            sizes = np.bincount(labels)
            for mode in WeightMode:
                p = np.full(sizes.size, 1 / sizes.size) if mode is WeightMode.UNIFORM else sizes / n
                v = oci_score(ds, labels, 1.0, mode)
                assert 1 - 1e-6 <= v <= np.sum(p * sizes) + 1e-6
        assert time.perf_counter() - start < 60

    def test_generalized_exponent(self):
        rng = np.random.default_rng(3)
        grid = SupportGrid(0.0, 10.0, 128)
        for _ in range(500):
            n = int(rng.integers(1, 11))
            ds = random_densities(rng, n, grid)
            labels = random_partition(rng, n)
            sizes = np.bincount(labels)
            a = float(rng.uniform(1e-3, 1.0))
            for mode in WeightMode:
                p = np.full(sizes.size, 1 / sizes.size) if mode is WeightMode.UNIFORM else sizes / n
                v = oci_score(ds, labels, a, mode)
                assert np.sum(p**a) - 1e-6 <= v <= np.sum(p**a * sizes) + 1e-6


# ---------------------------------------------------------------- 3


def _identical_cluster_densities(labels):
    """Densities identical within a cluster and disjoint across, so OCI attains its upper bound."""
    K = max(labels) + 1
    grid = SupportGrid(0.0, float(K), 64 * K)
    boxes = [GriddedDensity(grid, ((grid.t >= m + 0.1) & (grid.t <= m + 0.9)).astype(float)) for m in range(K)]
    return [boxes[m] for m in labels]


@pytest.mark.criterion(3, "upper bound decreases in K")
class TestUpperBoundMonotone:
    def test_uniform_symbolic(self):
        n = sympy.Symbol("n", positive=True)

        def bound(K):
            # sum over clusters of (1/K) * n_m, with the sizes summing to n
            sizes = sympy.symbols(f"s1:{K + 1}", positive=True)
            expr = sum(s / K for s in sizes)
            return sympy.simplify(expr.subs(sizes[-1], n - sum(sizes[:-1])))

        for K in range(1, 13):
            assert sympy.simplify(bound(K) - n / K) == 0
            step = sympy.simplify(bound(K + 1) - bound(K))
            assert sympy.simplify(step + n / (K * (K + 1))) == 0
            assert step.is_negative

    def test_proportional_cluster_splits(self):
        start = time.perf_counter()
        rng = np.random.default_rng(4)
        done = 0
        while done < 500:
            n = int(rng.integers(2, 11))
            labels = list(random_partition(rng, n))
            sizes = np.bincount(labels)
            splittable = np.flatnonzero(sizes >= 2)
            if splittable.size == 0:
                continue
            m = int(rng.choice(splittable))
            members = [i for i, v in enumerate(labels) if v == m]
            moved = rng.choice(members, size=int(rng.integers(1, len(members))), replace=False)
            split = list(labels)
            for i in moved:
                split[i] = max(labels) + 1
            split = canonical_labels(split)
            u = lambda lab: sum(Fraction(int(s) ** 2, n) for s in np.bincount(lab))  # noqa: E731
            assert u(split) < u(labels)
            a_k = oci_score(_identical_cluster_densities(labels), labels, 1.0, "proportional")
            a_k1 = oci_score(_identical_cluster_densities(split), split, 1.0, "proportional")
            assert a_k == pytest.approx(float(u(labels)), abs=1e-9)
            assert a_k1 < a_k
            done += 1
        assert time.perf_counter() - start < 10


# ---------------------------------------------------------------- 4


@pytest.mark.criterion(4, "OCI argmax equals objective argmin")
def test_exhaustive_equivalence_uniform():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    grid = SupportGrid(0.0, 10.0, 128)
    found = 0
    for trial in range(200):
        n = int(rng.integers(4, 9))
        K = int(rng.integers(2, 4))
        ds = random_densities(rng, n, grid)
        a = float(rng.uniform(0.05, 1.0))
        best_oci = brute_force_best_partition(ds, K, a, "uniform", "oci")
        best_wkm = brute_force_best_partition(ds, K, a, "uniform", "wkm", b=1.0)
        assert best_oci.same_as(best_wkm), f"instance {trial}"
        km = weighted_kmeans(ds, K, ClusteringConfig(restarts=20, seed=trial))
        found += km.same_as(best_oci)
    assert found >= 190, f"K-Means found the optimum in {found}/200 instances"
    assert time.perf_counter() - start < 300


# ---------------------------------------------------------------- 5


@pytest.mark.criterion(5, "OBI contracts")
class TestObiContracts:
    def test_identical_pair(self, unit_grid):
        f = normal_density(unit_grid, 1.0)
        assert obi_score([f, f], [0, 1]) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_pair(self):
        grid = SupportGrid(0.0, 4.0, 401)
        f = GriddedDensity(grid, (grid.t <= 1.0).astype(float))
        g = GriddedDensity(grid, (grid.t >= 3.0).astype(float))
        assert obi_score([f, g], [0, 1]) == pytest.approx(0.0, abs=1e-9)

    def test_singleton(self, unit_grid):
        assert obi_score([normal_density(unit_grid, 0.0)], [0]) == 0.0

    def test_permutation_invariance(self, unit_grid):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            ds = random_densities(rng, n, unit_grid)
            perm = rng.permutation(n)
            assert obi_score([ds[i] for i in perm], list(range(n))) == pytest.approx(
                obi_score(ds, list(range(n))), abs=1e-12
            )


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6, "heterogeneous ten-subgroup reproduction")
def test_heterogeneous_three_clusters():
    start = time.perf_counter()
    res = heterogeneous_fit()
    assert res.clustering.partition.K == 3
    obi = np.array(res.clustering.obi)
    order = np.argsort(-obi)
    np.testing.assert_allclose(obi[order], [0.736, 0.705, 0.601], atol=0.06)
    tau_mean = res.posteriors.tau.mean(axis=0)[order]
    assert tau_mean[0] > tau_mean[1] > tau_mean[2]
    assert time.perf_counter() - start < 120


# ---------------------------------------------------------------- 7


@pytest.mark.criterion(7, "sarcoma golden test")
class TestSarcoma:
    def test_two_clusters_at_quarter(self):
        res = sarcoma_fit(0.25)
        part = res.clustering.partition
        labels = res.posteriors.labels
        clusters = [frozenset(labels[i] for i in part.members(m)) for m in range(part.K)]
        K = part.K
        assert K == 2, f"got {K} clusters: {sorted(map(sorted, clusters))}"
        assert frozenset(SARCOMA_HIGH) in clusters

    def test_three_clusters_with_higher_mean_obi(self):
        start = time.perf_counter()
        res = sarcoma_fit(0.2)
        assert res.clustering.partition.K == 3
        two = res.clustering.partitions_by_k[2]
        two_obi = [obi_score(res.densities, two.members(m)) for m in range(2)]
        assert np.mean(res.clustering.obi) > np.mean(two_obi)
        assert time.perf_counter() - start < 120


# ---------------------------------------------------------------- 8


@pytest.mark.criterion(8, "Independent type I exactness")
def test_independent_type_one_error():
    start = time.perf_counter()
    exact = stats.binom.sf(3, 15, 0.1)
    assert exact == pytest.approx(0.0556, abs=1e-4)
    rates = np.array(scenario6_independent().get("scenario6", "independent").rejection_rate)
    assert np.all((rates >= 0.043) & (rates <= 0.068)), rates
    assert time.perf_counter() - start < 60


# ---------------------------------------------------------------- 9


@pytest.mark.criterion(9, "operating characteristic bands")
class TestOperatingBands:
    def test_scenario1(self):
        rate = np.array(table_study().get("scenario1", "bhmoi").rejection_rate)
        assert np.all(rate[7:] >= 0.95), rate
        assert np.all(rate[:4] <= 0.15), rate

    def test_scenario6(self):
        rate = np.array(table_study().get("scenario6", "bhmoi").rejection_rate)
        assert np.all(rate <= 0.07), rate

    def test_scenario2(self):
        rate = np.array(table_study().get("scenario2", "bhmoi").rejection_rate)
        assert np.all(rate[7:9] >= 0.45), rate


# ---------------------------------------------------------------- 10


@pytest.mark.criterion(10, "MSE ordering")
def test_mse_ordering_scenario1():
    study = table_study()
    mse = {m: study.get("scenario1", m).mean_mse for m in ("oracle", "bhmoi", "independent")}
    oracle, bhmoi, independent = mse["oracle"], mse["bhmoi"], mse["independent"]
    assert oracle <= bhmoi <= independent, mse


# ---------------------------------------------------------------- 11


@pytest.mark.criterion(11, "determinism")
def test_rerun_is_byte_identical():
    first = [
        dump_json(fit_document(heterogeneous_fit())),
        dump_json(fit_document(sarcoma_fit(0.25))),
        dump_json(fit_document(sarcoma_fit(0.2))),
        dump_json(study_document(scenario6_independent())),
        dump_json(study_document(table_study())),
    ]
    for cached in (heterogeneous_fit, sarcoma_fit):
        cached.cache_clear()
    second = [
        dump_json(fit_document(heterogeneous_fit())),
        dump_json(fit_document(sarcoma_fit(0.25))),
        dump_json(fit_document(sarcoma_fit(0.2))),
        dump_json(study_document(_scenario6_independent())),
        dump_json(study_document(_table_study())),
    ]
    for a, b in zip(first, second):
        assert a == b
