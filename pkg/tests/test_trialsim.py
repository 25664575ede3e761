"""Scenario generation, comparator analyses and operating characteristics."""

import numpy as np
import pytest
from scipy import stats

from bhmoi.engine import BinaryTrialData, McmcConfig
from bhmoi.trialsim import (
    CUTOFF_GRID,
    SCENARIOS,
    CalibrationError,
    ComparatorMethod,
    DecisionRule,
    OperatingCharacteristics,
    ScenarioSpec,
    StudyConfig,
    StudyError,
    analyze,
    calibrate_cutoff,
    compute_och,
    compute_oce,
    generate_scenario,
    run_study,
    scenario,
    simulate_trial,
    uniform_rate_scenario,
)
import bhmoi.trialsim as trialsim

FAST = StudyConfig(mcmc=McmcConfig(iterations=3_000, burn_in=1_000))


class TestScenarios:
    def test_table_layout(self):
        levels = {0.1: "L", 0.25: "M", 0.5: "H"}
        layout = {k: "".join(levels[r] for r in s.rates) for k, s in SCENARIOS.items()}
        assert layout == {
            1: "LLLLMMMHHH",
            2: "LLLLLLLMMH",
            3: "LLLLLMMMMM",
            4: "LLLLLLLHHH",
            5: "LLLLLLLMMM",
            6: "LLLLLLLLLL",
        }
        assert all(s.per_subgroup_n == 15 for s in SCENARIOS.values())
        assert [SCENARIOS[k].bhmoi_a for k in range(1, 7)] == [0.3, 0.3, 0.45, 0.45, 0.45, 0.5]

    def test_true_partition(self):
        assert SCENARIOS[1].true_partition == (0, 0, 0, 0, 1, 1, 1, 2, 2, 2)
        assert SCENARIOS[6].true_partition == (0,) * 10

    @pytest.mark.parametrize("kw", [{"rates": (0.0, 0.2)}, {"rates": (0.2,), "per_subgroup_n": 0}, {"rates": ()}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ScenarioSpec(**kw)

    def test_unknown_number(self):
        with pytest.raises(ValueError):
            scenario(7)


class TestGenerateScenario:
    def test_near_zero_rate(self):
        spec = ScenarioSpec((1e-9,), name="tiny")
        assert all(generate_scenario(spec, s).responses == (0,) for s in range(50))

    def test_binomial_mean(self):
        spec = ScenarioSpec((0.25,), name="mean")
        y = [generate_scenario(spec, s).responses[0] for s in range(100_000)]
        assert np.mean(y) == pytest.approx(3.75, abs=0.02)

    def test_seeded(self):
        assert generate_scenario(SCENARIOS[1], 9) == generate_scenario(SCENARIOS[1], 9)

    def test_uniform_rates_inside_ranges(self):
        spec = uniform_rate_scenario(1)
        for seed in range(50):
            _, rates = simulate_trial(spec, seed)
            for r, (lo, hi) in zip(rates, spec.rate_ranges):
                assert lo <= r <= hi
        assert spec.true_partition == SCENARIOS[1].true_partition


class TestAnalyze:
    def test_independent_beta_tail(self):
        trial = BinaryTrialData([4], [15])
        res = analyze("independent", trial)
        assert res.prob_exceeds[0] == pytest.approx(stats.beta.sf(0.1, 4.5, 11.5), abs=1e-12)
        assert DecisionRule().rejects(res.prob_exceeds)[0]
        assert not DecisionRule().rejects(analyze("independent", BinaryTrialData([3], [15])).prob_exceeds)[0]

    def test_pooled_identical_data(self):
        res = analyze("pooled", BinaryTrialData([3] * 4, [15] * 4))
        assert len(set(res.estimates.tolist())) == 1
        assert res.estimates[0] == pytest.approx(12.5 / 61)

    def test_oracle_pools_within_true_clusters(self):
        trial = generate_scenario(SCENARIOS[1], 4)
        res = analyze("oracle", trial, true_partition=SCENARIOS[1].true_partition)
        for block in (slice(0, 4), slice(4, 7), slice(7, 10)):
            assert len(set(res.estimates[block].tolist())) == 1

    def test_oracle_needs_partition(self):
        with pytest.raises(ValueError):
            analyze("oracle", BinaryTrialData([1], [5]))

    def test_fixed_borrowing_strength_ordering(self):
        trial = BinaryTrialData([1, 2, 3, 9], [15] * 4)
        spread = {m: np.ptp(analyze(m, trial, FAST).estimates) for m in ("independent", "bhm_moderate", "bhm_strong")}
        assert spread["bhm_strong"] < spread["bhm_moderate"] < spread["independent"]

    def test_bhmoi_uses_given_a(self):
        trial = generate_scenario(SCENARIOS[1], 4)
        res = analyze("bhmoi", trial, FAST, a=0.3)
        assert res.estimates.shape == (10,) and np.all((res.prob_exceeds >= 0) & (res.prob_exceeds <= 1))

    def test_method_parsing(self):
        assert ComparatorMethod.parse("BHM-M") is ComparatorMethod.BHM_MODERATE
        with pytest.raises(ValueError, match="unknown method"):
            ComparatorMethod.parse("bacis")


class TestOperatingCharacteristics:
    def test_perfect_estimates(self):
        mse, bias = compute_oce(np.tile([0.1, 0.5], (5, 1)), np.array([0.1, 0.5]))
        np.testing.assert_array_equal(mse, 0)
        np.testing.assert_array_equal(bias, 0)

    def test_constant_estimator(self):
        mse, bias = compute_oce(np.full((100, 1), 0.3), np.array([0.1]))
        assert bias[0] == pytest.approx(0.2) and mse[0] == pytest.approx(0.04)

    def test_beta_mean_mse_matches_enumeration(self):
        spec = ScenarioSpec((0.1,), name="enum")
        y = np.array([generate_scenario(spec, s).responses[0] for s in range(100_000)])
        mse, _ = compute_oce(((0.5 + y) / 16.0)[:, None], np.array([0.1]))
        k = np.arange(16)
        exact = np.sum(stats.binom.pmf(k, 15, 0.1) * ((0.5 + k) / 16 - 0.1) ** 2)
        assert mse[0] == pytest.approx(exact, abs=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_oce(np.zeros((3, 2)), np.zeros(3))

    def test_och_extremes(self):
        assert compute_och(np.ones((4, 3), bool)).tolist() == [1.0] * 3
        assert compute_och(np.zeros((4, 3), bool)).tolist() == [0.0] * 3

    def test_rejection_monotone_in_cutoff(self):
        probs = np.random.default_rng(0).uniform(size=(200, 10))
        rates = [compute_och(DecisionRule(cutoff=c).rejects(probs)) for c in CUTOFF_GRID]
        assert all(np.all(b <= a) for a, b in zip(rates, rates[1:]))

    def test_bias_mse_consistency_enforced(self):
        with pytest.raises(ValueError):
            OperatingCharacteristics("m", "s", 1, 0, ("g1",), (0.1,), (0.0,), (0.01,), (0.2,))


class TestRunStudy:
    def test_single_replication_smoke(self):
        res = run_study([SCENARIOS[6]], ["independent"], reps=1, seed=3)
        (oc,) = res.characteristics
        assert oc.replications == 1 and oc.rejection_rate is not None
        assert all(b * b <= m + 1e-12 for b, m in zip(oc.bias, oc.mse))

    def test_seed_determinism_and_worker_independence(self):
        args = ([SCENARIOS[1]], ["independent", "bhmoi"], 6, 11, FAST)
        a = run_study(*args, workers=1)
        b = run_study(*args, workers=1)
        c = run_study(*args, workers=2)
        assert [x.as_dict() for x in a.characteristics] == [x.as_dict() for x in b.characteristics]
        assert [x.as_dict() for x in a.characteristics] == [x.as_dict() for x in c.characteristics]

    def test_workers_from_environment(self, monkeypatch):
        monkeypatch.setenv(trialsim.WORKERS_ENV, "3")
        assert trialsim.resolve_workers() == 3
        assert trialsim.resolve_workers(1) == 1
        monkeypatch.setenv(trialsim.WORKERS_ENV, "0")
        with pytest.raises(ValueError):
            trialsim.resolve_workers()

    def test_oracle_dominates_independent(self):
        res = run_study(list(SCENARIOS.values()), ["oracle", "independent"], reps=2000, seed=5)
        for k, spec in SCENARIOS.items():
            assert res.get(spec.name, "oracle").mean_mse <= res.get(spec.name, "independent").mean_mse

    def test_uniform_rates_report_no_och(self):
        res = run_study([uniform_rate_scenario(1)], ["independent", "oracle"], reps=50, seed=2)
        assert all(oc.rejection_rate is None for oc in res.characteristics)

    def test_failures_over_budget(self, monkeypatch):
        def broken(method, trial, *a, **k):
            raise RuntimeError("boom")

        monkeypatch.setattr(trialsim, "analyze", broken)
        with pytest.raises(StudyError, match="failed"):
            run_study([SCENARIOS[6]], ["independent"], reps=10, seed=1)

    def test_failures_within_budget_are_recorded(self, monkeypatch):
        real = trialsim.analyze
        calls = {"n": 0}

        def flaky(method, trial, *a, **k):
            calls["n"] += 1
            if calls["n"] == 5:
                raise RuntimeError("one bad replication")
            return real(method, trial, *a, **k)

        monkeypatch.setattr(trialsim, "analyze", flaky)
        res = run_study([SCENARIOS[6]], ["independent"], reps=200, seed=1)
        assert res.characteristics[0].failures == 1 and res.characteristics[0].replications == 199
        assert res.failures[0]["replication"] == 4


class TestCalibrateCutoff:
    def test_independent_meets_target(self):
        assert calibrate_cutoff("independent", SCENARIOS[6], 0.06, reps=2000, seed=1) <= 0.95

    def test_target_one(self):
        assert calibrate_cutoff("independent", SCENARIOS[6], 1.0, reps=20) == 0.80

    def test_target_zero(self):
        with pytest.raises(ValueError):
            calibrate_cutoff("independent", SCENARIOS[6], 0.0, reps=20)

    def test_unreachable_target_lists_rates(self):
        with pytest.raises(CalibrationError, match="0.99"):
            calibrate_cutoff("pooled", SCENARIOS[1], 0.01, reps=50)
