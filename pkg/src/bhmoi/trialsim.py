"""Simulated basket trials and operating characteristics of competing analyses.

A study is a full factorial sweep of scenarios and methods. Each replication
draws one trial from its own seeded stream, every method analyses that same
trial, and the per-replication records are reduced in replication order, so
results do not depend on how replications were spread over worker processes.
"""

from __future__ import annotations

import enum
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import stats

from .clustering import ClusteringConfig, canonical_labels
from .engine import (
    BinaryTrialData,
    HierPriorConfig,
    McmcConfig,
    _jsonable,
    fit_cluster_bhm_binary,
    run_bhmoi_binary,
)

__all__ = [
    "ScenarioSpec",
    "ComparatorMethod",
    "DecisionRule",
    "StudyConfig",
    "MethodAnalysis",
    "OperatingCharacteristics",
    "StudyResult",
    "StudyError",
    "CalibrationError",
    "SCENARIOS",
    "RATE_LEVELS",
    "UNIFORM_RATE_RANGES",
    "scenario",
    "uniform_rate_scenario",
    "simulate_trial",
    "generate_scenario",
    "analyze",
    "compute_oce",
    "compute_och",
    "calibrate_cutoff",
    "run_study",
    "study_manifest",
    "replication_seeds",
    "resolve_workers",
    "CUTOFF_GRID",
    "WORKERS_ENV",
]

WORKERS_ENV = "BHMOI_WORKERS"
MAX_FAILURE_FRACTION = 0.01
CUTOFF_GRID = tuple(round(0.80 + 0.01 * i, 2) for i in range(20))

RATE_LEVELS = {"low": 0.1, "medium": 0.25, "high": 0.5}
UNIFORM_RATE_RANGES = {"low": (0.05, 0.15), "medium": (0.20, 0.30), "high": (0.35, 0.65)}


class StudyError(RuntimeError):
    """Raised when too many replications of a study fail."""


class CalibrationError(ValueError):
    """Raised when no cutoff on the grid meets the type I target."""


@dataclass(frozen=True)
class ScenarioSpec:
    """True response rates of one simulated basket trial.

    ``rate_ranges`` switches to the random-rate variant: each replication draws
    subgroup i's rate uniformly from ``rate_ranges[i]`` and ``rates`` then only
    records the range midpoints. ``bhmoi_a`` is the OCI exponent used when the
    overlap-index model analyses this scenario.
    """

    rates: tuple[float, ...]
    per_subgroup_n: int = 15
    name: str = ""
    bhmoi_a: float = 0.5
    rate_ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        if not rates:
            raise ValueError("scenario has no subgroups")
        if not all(0.0 < r < 1.0 for r in rates):
            raise ValueError("rates must lie in (0, 1)")
        if int(self.per_subgroup_n) < 1:
            raise ValueError("per_subgroup_n must be >= 1")
        if not 0.0 < self.bhmoi_a <= 1.0:
            raise ValueError("bhmoi_a must lie in (0, 1]")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "per_subgroup_n", int(self.per_subgroup_n))
        object.__setattr__(self, "name", self.name or "custom")
        if self.rate_ranges is not None:
            ranges = tuple((float(lo), float(hi)) for lo, hi in self.rate_ranges)
            if len(ranges) != len(rates):
                raise ValueError("rate_ranges must have one range per subgroup")
            if not all(0.0 < lo <= hi < 1.0 for lo, hi in ranges):
                raise ValueError("rate ranges must satisfy 0 < lo <= hi < 1")
            object.__setattr__(self, "rate_ranges", ranges)

    @property
    def n_subgroups(self) -> int:
        return len(self.rates)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(f"g{i + 1}" for i in range(self.n_subgroups))

    @property
    def random_rates(self) -> bool:
        return self.rate_ranges is not None

    @property
    def true_partition(self) -> tuple[int, ...]:
        """Subgroups sharing a rate level form one true cluster."""
        keys = self.rate_ranges if self.rate_ranges is not None else self.rates
        return canonical_labels([keys.index(k) for k in keys])

    @property
    def seed_key(self) -> int:
        return zlib.crc32(self.name.encode("utf-8"))


def _levels(*counts: tuple[str, int]) -> tuple[str, ...]:
    return tuple(level for level, k in counts for _ in range(k))


_SCENARIO_LEVELS = {
    1: (_levels(("low", 4), ("medium", 3), ("high", 3)), 0.3),
    2: (_levels(("low", 7), ("medium", 2), ("high", 1)), 0.3),
    3: (_levels(("low", 5), ("medium", 5)), 0.45),
    4: (_levels(("low", 7), ("high", 3)), 0.45),
    5: (_levels(("low", 7), ("medium", 3)), 0.45),
    6: (_levels(("low", 10)), 0.5),
}


def scenario(number: int, per_subgroup_n: int = 15, a: float | None = None) -> ScenarioSpec:
    """One of the six standard heterogeneity scenarios (ten subgroups at low/medium/high rates)."""
    if number not in _SCENARIO_LEVELS:
        raise ValueError(f"unknown scenario {number}; choose from 1-6")
    levels, default_a = _SCENARIO_LEVELS[number]
    return ScenarioSpec(
        rates=tuple(RATE_LEVELS[lv] for lv in levels),
        per_subgroup_n=per_subgroup_n,
        name=f"scenario{number}",
        bhmoi_a=default_a if a is None else a,
    )


def uniform_rate_scenario(number: int, per_subgroup_n: int = 15, a: float | None = None) -> ScenarioSpec:
    """Scenario ``number`` with each rate drawn per replication from its level's range."""
    if number not in _SCENARIO_LEVELS:
        raise ValueError(f"unknown scenario {number}; choose from 1-6")
    levels, default_a = _SCENARIO_LEVELS[number]
    ranges = tuple(UNIFORM_RATE_RANGES[lv] for lv in levels)
    return ScenarioSpec(
        rates=tuple(0.5 * (lo + hi) for lo, hi in ranges),
        per_subgroup_n=per_subgroup_n,
        name=f"scenario{number}-uniform",
        bhmoi_a=default_a if a is None else a,
        rate_ranges=ranges,
    )


SCENARIOS: dict[int, ScenarioSpec] = {k: scenario(k) for k in _SCENARIO_LEVELS}


class ComparatorMethod(str, enum.Enum):
    BHMOI = "bhmoi"
    INDEPENDENT = "independent"
    POOLED = "pooled"
    BHM_MODERATE = "bhm_moderate"
    BHM_STRONG = "bhm_strong"
    ORACLE = "oracle"

    @classmethod
    def parse(cls, text: str) -> "ComparatorMethod":
        key = text.strip().lower().replace("-", "_")
        aliases = {"bhm_m": "bhm_moderate", "bhm_s": "bhm_strong"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown method {text!r}; choose from {choices}") from None


# gamma shape of the single-cluster precision prior, rate 1
_FIXED_BORROWING = {ComparatorMethod.BHM_MODERATE: 5.0, ComparatorMethod.BHM_STRONG: 50.0}


@dataclass(frozen=True)
class DecisionRule:
    """Reject H0: p_i <= p_null when Pr(p_i > p_null | data) > cutoff."""

    p_null: float = 0.1
    cutoff: float = 0.95

    def __post_init__(self):
        if not (0.0 < self.p_null < 1.0 and 0.0 < self.cutoff < 1.0):
            raise ValueError("p_null and cutoff must lie in (0, 1)")

    def rejects(self, prob_exceeds: np.ndarray) -> np.ndarray:
        return np.asarray(prob_exceeds) > self.cutoff


@dataclass(frozen=True)
class StudyConfig:
    """Model settings shared by all replications of a study."""

    prior: HierPriorConfig = field(default_factory=HierPriorConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    rule: DecisionRule = field(default_factory=DecisionRule)
    grid_points: int = 512
    grid_extension: float = 3.0


@dataclass(frozen=True)
class MethodAnalysis:
    """Per-subgroup posterior mean of the response rate and Pr(p_i > p_null)."""

    estimates: np.ndarray
    prob_exceeds: np.ndarray


def simulate_trial(spec: ScenarioSpec, seed: int) -> tuple[BinaryTrialData, np.ndarray]:
    """Draw one trial and return it with the true rates it was drawn from."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    if spec.rate_ranges is not None:
        lo, hi = np.array(spec.rate_ranges).T
        rates = rng.uniform(lo, hi)
    else:
        rates = np.array(spec.rates)
    y = rng.binomial(spec.per_subgroup_n, rates)
    sizes = [spec.per_subgroup_n] * spec.n_subgroups
    return BinaryTrialData(y.tolist(), sizes, spec.labels), rates


def generate_scenario(spec: ScenarioSpec, seed: int) -> BinaryTrialData:
    return simulate_trial(spec, seed)[0]


def _beta_analysis(a: np.ndarray, b: np.ndarray, p_null: float) -> MethodAnalysis:
    return MethodAnalysis(a / (a + b), stats.beta.sf(p_null, a, b))


def analyze(
    method: ComparatorMethod | str,
    trial: BinaryTrialData,
    config: StudyConfig | None = None,
    rule: DecisionRule | None = None,
    *,
    true_partition: Sequence[int] | None = None,
    a: float | None = None,
) -> MethodAnalysis:
    """Analyse one trial with one method.

    Independent, Pooled and Oracle use Jeffreys Beta(0.5, 0.5) posteriors on
    per-subgroup, all-subgroup and per-true-cluster counts respectively. The
    fixed-borrowing BHMs put every subgroup in one cluster with a Gamma(5, 1)
    or Gamma(50, 1) precision prior. Oracle needs ``true_partition``; the
    overlap-index model uses ``a`` in place of the configured OCI exponent.
    """
    method = ComparatorMethod.parse(method) if isinstance(method, str) else method
    config = config or StudyConfig()
    rule = rule or config.rule
    y = np.asarray(trial.responses, dtype=float)
    n = np.asarray(trial.sizes, dtype=float)

    if method is ComparatorMethod.INDEPENDENT:
        return _beta_analysis(0.5 + y, 0.5 + n - y, rule.p_null)
    if method is ComparatorMethod.POOLED:
        ones = np.ones_like(y)
        return _beta_analysis(ones * (0.5 + y.sum()), ones * (0.5 + (n - y).sum()), rule.p_null)
    if method is ComparatorMethod.ORACLE:
        if true_partition is None:
            raise ValueError("oracle analysis needs the true partition")
        labels = np.asarray(canonical_labels(list(true_partition)))
        if labels.size != y.size:
            raise ValueError("true partition does not match the trial")
        ys = np.bincount(labels, weights=y)[labels]
        ns = np.bincount(labels, weights=n)[labels]
        return _beta_analysis(0.5 + ys, 0.5 + ns - ys, rule.p_null)
    if method in _FIXED_BORROWING:
        prior = replace(config.prior, beta=1.0)
        post = fit_cluster_bhm_binary(trial, [0] * len(trial), [_FIXED_BORROWING[method]], prior, config.mcmc)
        return MethodAnalysis(post.posterior_mean(), post.prob_exceeds(rule.p_null))

    cluster_config = config.clustering if a is None else replace(config.clustering, a=a)
    res = run_bhmoi_binary(trial, cluster_config, config.prior, config.mcmc, config.grid_points, config.grid_extension)
    return MethodAnalysis(res.posteriors.posterior_mean(), res.posteriors.prob_exceeds(rule.p_null))


def compute_oce(estimates: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-subgroup (MSE, bias) of estimates (replications x subgroups).

    ``truth`` is one rate per subgroup, or one row per replication when the
    true rates vary between replications.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if est.shape[0] < 1 or est.size == 0:
        raise ValueError("need at least one replication")
    if truth.shape not in (est.shape[1:], est.shape):
        raise ValueError(f"truth shape {truth.shape} does not match estimates {est.shape}")
    err = est - truth
    return np.mean(err**2, axis=0), np.mean(err, axis=0)


def compute_och(decisions: np.ndarray) -> np.ndarray:
    """Per-subgroup fraction of replications that reject."""
    d = np.atleast_2d(np.asarray(decisions, dtype=bool))
    if d.shape[0] < 1 or d.size == 0:
        raise ValueError("need at least one replication")
    return d.mean(axis=0)


@dataclass(frozen=True)
class OperatingCharacteristics:
    """Per-subgroup results of one method on one scenario.

    ``rejection_rate`` is None for random-rate scenarios, where a subgroup has
    no fixed null or alternative status.
    """

    method: str
    scenario: str
    replications: int
    failures: int
    labels: tuple[str, ...]
    true_rates: tuple[float, ...]
    rejection_rate: tuple[float, ...] | None
    mse: tuple[float, ...]
    bias: tuple[float, ...]

    def __post_init__(self):
        if self.rejection_rate is not None and not all(0.0 <= r <= 1.0 for r in self.rejection_rate):
            raise ValueError("rejection rates must lie in [0, 1]")
        if any(m < 0 for m in self.mse):
            raise ValueError("MSE must be non-negative")
        if any(b * b > m + 1e-12 for b, m in zip(self.bias, self.mse)):
            raise ValueError("squared bias exceeds MSE")

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    def as_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "scenario": self.scenario,
            "replications": self.replications,
            "failures": self.failures,
            "labels": list(self.labels),
            "true_rates": list(self.true_rates),
            "rejection_rate": None if self.rejection_rate is None else list(self.rejection_rate),
            "mse": list(self.mse),
            "bias": list(self.bias),
        }


@dataclass
class StudyResult:
    characteristics: list[OperatingCharacteristics]
    failures: list[dict[str, Any]]
    seed: int
    replications: int
    config: StudyConfig
    scenarios: list[ScenarioSpec]

    def get(self, scenario_name: str, method: ComparatorMethod | str) -> OperatingCharacteristics:
        m = ComparatorMethod.parse(method) if isinstance(method, str) else method
        for oc in self.characteristics:
            if oc.scenario == scenario_name and oc.method == m.value:
                return oc
        raise KeyError(f"no result for {scenario_name} / {m.value}")


def replication_seeds(seed: int, spec: ScenarioSpec, rep: int) -> tuple[int, int]:
    """(data seed, analysis seed) of one replication."""
    state = np.random.SeedSequence([int(seed), spec.seed_key, int(rep)]).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def _with_seed(config: StudyConfig, seed: int) -> StudyConfig:
    return replace(config, mcmc=replace(config.mcmc, seed=seed), clustering=replace(config.clustering, seed=seed))


def _run_replication(spec: ScenarioSpec, methods: Sequence[ComparatorMethod], config: StudyConfig, seed: int, rep: int):
    data_seed, analysis_seed = replication_seeds(seed, spec, rep)
    trial, rates = simulate_trial(spec, data_seed)
    cfg = _with_seed(config, analysis_seed)
    out = {}
    for method in methods:
        try:
            res = analyze(method, trial, cfg, true_partition=spec.true_partition, a=spec.bhmoi_a)
            out[method.value] = (res.estimates, res.prob_exceeds)
        except Exception as exc:  # recorded and counted against the failure budget
            out[method.value] = f"{type(exc).__name__}: {exc}"
    return rep, rates, out


def _run_chunk(spec, methods, config, seed, reps):
    return [_run_replication(spec, methods, config, seed, r) for r in reps]


def resolve_workers(workers: int | None = None) -> int:
    """Worker processes: explicit argument, else the environment variable, else 1."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV, "").strip()
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    return workers


def _replicate(spec, methods, config, seed, reps, workers):
    if workers == 1:
        return _run_chunk(spec, methods, config, seed, range(reps))
    chunks = [list(range(reps))[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_chunk, spec, methods, config, seed, c) for c in chunks if c]
        records = [r for f in futures for r in f.result()]
    return sorted(records, key=lambda r: r[0])


def run_study(
    scenarios: Iterable[ScenarioSpec],
    methods: Iterable[ComparatorMethod | str],
    reps: int = 500,
    seed: int = 12345,
    config: StudyConfig | None = None,
    workers: int | None = None,
) -> StudyResult:
    """Replicate every scenario ``reps`` times and analyse each trial with every method."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    config = config or StudyConfig()
    scenarios = list(scenarios)
    methods = [ComparatorMethod.parse(m) if isinstance(m, str) else m for m in methods]
    if not scenarios or not methods:
        raise ValueError("need at least one scenario and one method")
    workers = resolve_workers(workers)

    characteristics, failures = [], []
    for spec in scenarios:
        records = _replicate(spec, methods, config, seed, reps, workers)
        truth = np.array([r[1] for r in records])
        for method in methods:
            est, probs, ok = [], [], []
            for rep, _, out in records:
                res = out[method.value]
                if isinstance(res, str):
                    failures.append({"scenario": spec.name, "method": method.value, "replication": rep, "error": res})
                    continue
                est.append(res[0])
                probs.append(res[1])
                ok.append(rep)
            n_fail = reps - len(ok)
            if n_fail > MAX_FAILURE_FRACTION * reps:
                raise StudyError(f"{spec.name}/{method.value}: {n_fail} of {reps} replications failed")
            mse, bias = compute_oce(np.array(est), truth[ok])
            rejection = None
            if not spec.random_rates:
                rejection = tuple(float(v) for v in compute_och(config.rule.rejects(np.array(probs))))
            characteristics.append(
                OperatingCharacteristics(
                    method=method.value,
                    scenario=spec.name,
                    replications=len(ok),
                    failures=n_fail,
                    labels=spec.labels,
                    true_rates=spec.rates,
                    rejection_rate=rejection,
                    mse=tuple(float(v) for v in mse),
                    bias=tuple(float(v) for v in bias),
                )
            )
    return StudyResult(characteristics, failures, int(seed), reps, config, scenarios)


def calibrate_cutoff(
    method: ComparatorMethod | str,
    null_scenario: ScenarioSpec,
    target_alpha: float,
    reps: int = 500,
    seed: int = 12345,
    config: StudyConfig | None = None,
    workers: int | None = None,
) -> float:
    """Smallest cutoff on 0.80, 0.81, ..., 0.99 whose mean type I error under
    ``null_scenario`` is at most ``target_alpha``."""
    # a continuous posterior never gives exactly zero type I error, so 0 is refused
    if not 0.0 < target_alpha <= 1.0:
        raise ValueError(f"target_alpha must lie in (0, 1], got {target_alpha}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    config = config or StudyConfig()
    method = ComparatorMethod.parse(method) if isinstance(method, str) else method
    records = _replicate(null_scenario, [method], config, seed, reps, resolve_workers(workers))
    probs = [out[method.value][1] for _, _, out in records if not isinstance(out[method.value], str)]
    n_fail = reps - len(probs)
    if n_fail > MAX_FAILURE_FRACTION * reps:
        raise StudyError(f"{null_scenario.name}/{method.value}: {n_fail} of {reps} replications failed")
    probs = np.array(probs)
    achieved = {}
    for cutoff in CUTOFF_GRID:
        rate = float(np.mean(probs > cutoff))
        achieved[cutoff] = rate
        if rate <= target_alpha:
            return cutoff
    detail = ", ".join(f"{c:.2f}: {r:.4f}" for c, r in achieved.items())
    raise CalibrationError(f"no cutoff reaches type I error <= {target_alpha}; achieved rates {detail}")


def study_manifest(result: StudyResult) -> dict[str, Any]:
    """Seeds, configs and per-replication seed recipe needed to reproduce a study."""
    cfg = result.config
    return {
        "seed": result.seed,
        "replications": result.replications,
        "seed_derivation": "SeedSequence([seed, crc32(scenario name), replication]) -> (data seed, analysis seed)",
        "scenarios": [
            {
                "name": s.name,
                "rates": list(s.rates),
                "per_subgroup_n": s.per_subgroup_n,
                "bhmoi_a": s.bhmoi_a,
                "rate_ranges": None if s.rate_ranges is None else [list(r) for r in s.rate_ranges],
            }
            for s in result.scenarios
        ],
        "methods": sorted({oc.method for oc in result.characteristics}),
        "config": {
            "prior": _jsonable(asdict(cfg.prior)),
            "mcmc": asdict(cfg.mcmc),
            "clustering": _jsonable(asdict(cfg.clustering)),
            "rule": asdict(cfg.rule),
            "grid_points": cfg.grid_points,
            "grid_extension": cfg.grid_extension,
        },
        "failures": list(result.failures),
    }

