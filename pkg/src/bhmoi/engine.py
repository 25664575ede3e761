"""Hierarchical models with overlap-driven borrowing.

Pipeline for binary endpoints:

1. per-subgroup posteriors under a vague normal prior on the logit scale,
2. kernel densities of those posteriors (probability scale) on a common grid,
3. OCI-maximizing weighted K-Means partition and per-cluster OBI,
4. OBI mapped to the gamma shape of each cluster's precision prior,
5. within-cluster hierarchical fit by Metropolis-within-Gibbs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, logit

from . import _kernels
from .clustering import ClusteringConfig, ClusteringResult, canonical_labels, optimal_partition
from .density import GriddedDensity, SampleSet, SupportGrid, build_common_grid, density_from_samples

__all__ = [
    "SlopeFunction",
    "BinaryTrialData",
    "NormalTrialData",
    "HierPriorConfig",
    "McmcConfig",
    "PosteriorDraws",
    "BhmoiResult",
    "ConvergenceError",
    "slope_k_alpha",
    "borrowing_alpha",
    "noninformative_posteriors_binary",
    "noninformative_posteriors_normal",
    "fit_cluster_bhm_binary",
    "fit_cluster_bhm_normal",
    "run_bhmoi_binary",
    "run_bhmoi_normal",
]

# stream tags keep the RNG of each pipeline stage independent
_NONINF = 0
_BHM = 1
_NORMAL = 2

ACCEPT_BOUNDS = (0.05, 0.95)


class ConvergenceError(RuntimeError):
    """Raised when a Metropolis chain's post-adaptation acceptance is out of bounds."""


class SlopeFunction(str, enum.Enum):
    AGGRESSIVE5 = "aggressive5"
    MODERATE1 = "moderate1"
    LINEAR = "linear"


def slope_k_alpha(obi: float, variant: SlopeFunction | str = SlopeFunction.AGGRESSIVE5) -> float:
    """Fraction of the way from no borrowing to full borrowing for a given OBI."""
    if not 0.0 <= obi <= 1.0:
        raise ValueError(f"OBI must lie in [0, 1], got {obi}")
    variant = SlopeFunction(variant)
    if variant is SlopeFunction.AGGRESSIVE5:
        return obi * math.exp(-5.0 * (1.0 - obi))
    if variant is SlopeFunction.MODERATE1:
        return obi * math.exp(-(1.0 - obi))
    return obi


@dataclass(frozen=True)
class BinaryTrialData:
    responses: tuple[int, ...]
    sizes: tuple[int, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        y = tuple(int(v) for v in self.responses)
        n = tuple(int(v) for v in self.sizes)
        labels = tuple(str(v) for v in self.labels) or tuple(str(i + 1) for i in range(len(y)))
        if not (len(y) == len(n) == len(labels)):
            raise ValueError("responses, sizes and labels must have equal lengths")
        if not y:
            raise ValueError("trial has no subgroups")
        for yi, ni, lab in zip(y, n, labels):
            if ni < 1:
                raise ValueError(f"subgroup {lab}: size must be positive")
            if not 0 <= yi <= ni:
                raise ValueError(f"subgroup {lab}: responses {yi} outside [0, {ni}]")
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "sizes", n)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.responses)

    def subset(self, idx: Sequence[int]) -> "BinaryTrialData":
        return BinaryTrialData(
            [self.responses[i] for i in idx], [self.sizes[i] for i in idx], [self.labels[i] for i in idx]
        )


@dataclass(frozen=True)
class NormalTrialData:
    outcomes: tuple[tuple[float, ...], ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        outcomes = tuple(tuple(float(v) for v in group) for group in self.outcomes)
        labels = tuple(str(v) for v in self.labels) or tuple(str(i + 1) for i in range(len(outcomes)))
        if len(outcomes) != len(labels):
            raise ValueError("outcomes and labels must have equal lengths")
        if not outcomes:
            raise ValueError("trial has no subgroups")
        for group, lab in zip(outcomes, labels):
            if not group:
                raise ValueError(f"subgroup {lab} has no outcomes")
            if not all(math.isfinite(v) for v in group):
                raise ValueError(f"subgroup {lab} has non-finite outcomes")
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.outcomes)


@dataclass(frozen=True)
class HierPriorConfig:
    """Priors of the hierarchy; gamma distributions use the shape-rate form."""

    mu0: float = float(logit(0.1))
    tau0: float = 0.1
    beta: float = 10.0
    alpha_min: float = 1.0
    alpha_max: float = 200.0
    slope: SlopeFunction = SlopeFunction.AGGRESSIVE5
    alpha_y: float = 1.0
    beta_y: float = 1.0
    noninf_tau: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "slope", SlopeFunction(self.slope))
        for name in ("tau0", "beta", "alpha_min", "alpha_max", "alpha_y", "beta_y", "noninf_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.alpha_min < self.alpha_max:
            raise ValueError("alpha_min must be below alpha_max")


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 12_000
    burn_in: int = 2_000
    thin: int = 1
    chains: int = 1
    seed: int = 12345
    target_acceptance: float = 0.44

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1 or self.chains < 1:
            raise ValueError("iterations, thin and chains must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must lie in [0, iterations)")
        if not 0 < self.target_acceptance < 1:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.retained_per_chain < 1:
            raise ValueError("no draws retained after burn-in and thinning")

    @classmethod
    def reporting(cls, seed: int = 12345) -> "McmcConfig":
        """Long multi-chain run for analysing a single real data set.

        Simulation defaults keep per-replication cost low; a one-off analysis can
        afford enough draws that partitions with near-equal OCI are not decided
        by Monte Carlo noise in the density estimates.
        """
        return cls(iterations=252_000, burn_in=2_000, thin=1, chains=4, seed=seed)

    @property
    def retained_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    @property
    def retained(self) -> int:
        return self.chains * self.retained_per_chain


def borrowing_alpha(obi: float, config: HierPriorConfig | None = None) -> float:
    """Gamma shape of the cluster precision prior implied by the cluster's OBI."""
    config = config or HierPriorConfig()
    k = slope_k_alpha(obi, config.slope)
    return config.alpha_min + k * (config.alpha_max - config.alpha_min)


@dataclass(eq=False)
class PosteriorDraws:
    """Retained draws, rows are iterations (chains stacked) and columns subgroups or clusters."""

    endpoint: str
    labels: tuple[str, ...]
    assignments: tuple[int, ...]
    theta: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    acceptance: np.ndarray
    tau_y: np.ndarray | None = None

    @property
    def p(self) -> np.ndarray | None:
        return expit(self.theta) if self.endpoint == "binary" else None

    @property
    def scale_draws(self) -> np.ndarray:
        """Draws on the reporting scale: response rate for binary, theta for normal."""
        return self.p if self.endpoint == "binary" else self.theta

    def posterior_mean(self) -> np.ndarray:
        return self.scale_draws.mean(axis=0)

    def prob_exceeds(self, threshold: float) -> np.ndarray:
        return (self.scale_draws > threshold).mean(axis=0)

    def summary(self, threshold: float | None = None, level: float = 0.95) -> list[dict[str, Any]]:
        x = self.scale_draws
        lo, hi = np.quantile(x, [(1 - level) / 2, (1 + level) / 2], axis=0)
        out = []
        for i, lab in enumerate(self.labels):
            row = {
                "label": lab,
                "cluster": self.assignments[i],
                "mean": float(x[:, i].mean()),
                "sd": float(x[:, i].std(ddof=1)) if x.shape[0] > 1 else 0.0,
                "lower": float(lo[i]),
                "upper": float(hi[i]),
                "acceptance": float(self.acceptance[i]),
            }
            if threshold is not None:
                row["prob_exceeds"] = float((x[:, i] > threshold).mean())
            out.append(row)
        return out


@dataclass(eq=False)
class BhmoiResult:
    clustering: ClusteringResult
    alphas: tuple[float, ...]
    posteriors: PosteriorDraws
    densities: list[GriddedDensity]
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def grid(self) -> SupportGrid:
        return self.densities[0].grid


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _check_acceptance(acc: np.ndarray, labels: Sequence[str], stage: str) -> None:
    lo, hi = ACCEPT_BOUNDS
    bad = [(lab, float(a)) for lab, a in zip(labels, acc) if not lo <= a <= hi]
    if bad:
        detail = ", ".join(f"{lab}: {a:.3f}" for lab, a in bad)
        raise ConvergenceError(f"{stage}: acceptance outside [{lo}, {hi}] after adaptation ({detail})")


def _run_logit_chain(y, n, rng, mcmc: McmcConfig, *, update_hyper, mu, tau, mu0, tau0, alpha, beta):
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    m = y.size
    it = mcmc.iterations
    z_prop = rng.standard_normal((it, m))
    log_u = np.log(rng.random((it, m)))
    z_mu = rng.standard_normal(it)
    g_tau = rng.standard_gamma(alpha + 0.5 * m, it) if update_hyper else np.zeros(it)
    theta0 = logit((y + 0.5) / (n + 1.0))
    if update_hyper:
        mu = float(theta0.mean())
    return _kernels.logit_normal_mwg(
        y, n, theta0, float(mu), float(tau), update_hyper, float(mu0), float(tau0), float(beta),
        z_prop, log_u, z_mu, g_tau, np.ones(m), mcmc.burn_in, mcmc.thin, mcmc.target_acceptance,
    )


def noninformative_posteriors_binary(
    trial: BinaryTrialData, config: HierPriorConfig | None = None, mcmc: McmcConfig | None = None
) -> list[SampleSet]:
    """Independent per-subgroup posteriors of the response rate under the vague prior
    theta_i ~ N(mu0, 1/noninf_tau), returned as probability-scale draws."""
    config = config or HierPriorConfig()
    mcmc = mcmc or McmcConfig()
    draws, accs = [], []
    for c in range(mcmc.chains):
        theta, _, _, acc, _ = _run_logit_chain(
            trial.responses, trial.sizes, _rng(mcmc.seed, _NONINF, c), mcmc,
            update_hyper=False, mu=config.mu0, tau=config.noninf_tau,
            mu0=config.mu0, tau0=config.tau0, alpha=1.0, beta=1.0,
        )
        draws.append(theta)
        accs.append(acc)
    _check_acceptance(np.mean(accs, axis=0), trial.labels, "non-informative fit")
    p = expit(np.vstack(draws))
    return [SampleSet(p[:, i], trial.labels[i]) for i in range(len(trial))]


def _labels_from(partition, n: int) -> np.ndarray:
    labels = np.asarray(canonical_labels([int(v) for v in getattr(partition, "assignments", partition)]))
    if labels.size != n:
        raise ValueError(f"partition covers {labels.size} subgroups, trial has {n}")
    return labels


def _checked_alphas(alphas, K: int) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (K,):
        raise ValueError(f"expected {K} alpha values, got {alphas.size}")
    if np.any(~(alphas > 0)):
        raise ValueError("alpha values must be positive")
    return alphas


def fit_cluster_bhm_binary(
    trial: BinaryTrialData,
    partition,
    alphas: Sequence[float],
    config: HierPriorConfig | None = None,
    mcmc: McmcConfig | None = None,
) -> PosteriorDraws:
    """Binomial-logit hierarchy fitted separately within each cluster.

    Cluster j uses tau_j ~ Gamma(alphas[j], config.beta). ``partition`` is a
    ClusterPartition or a plain assignment vector.
    """
    config = config or HierPriorConfig()
    mcmc = mcmc or McmcConfig()
    labels = _labels_from(partition, len(trial))
    K = int(labels.max()) + 1
    alphas = _checked_alphas(alphas, K)
    n_sub = len(trial)
    theta = np.empty((mcmc.retained, n_sub))
    mu = np.empty((mcmc.retained, K))
    tau = np.empty((mcmc.retained, K))
    acc = np.zeros(n_sub)
    y = np.asarray(trial.responses)
    n = np.asarray(trial.sizes)
    per = mcmc.retained_per_chain
    for j in range(K):
        idx = np.flatnonzero(labels == j)
        for c in range(mcmc.chains):
            th, m_, t_, a_, _ = _run_logit_chain(
                y[idx], n[idx], _rng(mcmc.seed, _BHM, c, j), mcmc,
                update_hyper=True, mu=0.0, tau=alphas[j] / config.beta,
                mu0=config.mu0, tau0=config.tau0, alpha=alphas[j], beta=config.beta,
            )
            rows = slice(c * per, (c + 1) * per)
            theta[rows, idx] = th
            mu[rows, j] = m_
            tau[rows, j] = t_
            acc[idx] += a_ / mcmc.chains
    _check_acceptance(acc, trial.labels, "hierarchical fit")
    return PosteriorDraws("binary", trial.labels, tuple(int(v) for v in labels), theta, mu, tau, acc)


def _normal_stats(trial: NormalTrialData):
    counts = np.array([len(g) for g in trial.outcomes], dtype=float)
    ybar = np.array([np.mean(g) for g in trial.outcomes])
    ss = np.array([float(np.sum((np.asarray(g) - np.mean(g)) ** 2)) for g in trial.outcomes])
    return ybar, ss, counts


def _run_normal_chain(trial, labels, K, alphas, rng, config, mcmc, *, update_hyper, mu_fixed, tau_fixed):
    ybar, ss, counts = _normal_stats(trial)
    m = len(trial)
    it = mcmc.iterations
    sizes = np.bincount(labels, minlength=K).astype(float)
    z_theta = rng.standard_normal((it, m))
    z_mu = rng.standard_normal((it, K))
    g_tau = rng.standard_gamma(alphas + 0.5 * sizes, (it, K)) if update_hyper else np.zeros((it, K))
    g_tau_y = rng.standard_gamma(config.alpha_y + 0.5 * counts.sum(), it)
    if update_hyper:
        mu_init = np.array([ybar[labels == j].mean() for j in range(K)])
        tau_init = alphas / config.beta
    else:
        mu_init = np.full(K, float(mu_fixed))
        tau_init = np.full(K, float(tau_fixed))
    return _kernels.normal_gibbs(
        ybar, ss, counts, labels.astype(np.int64), K, ybar.copy(), mu_init, tau_init,
        config.alpha_y / config.beta_y, update_hyper, config.mu0, config.tau0, config.beta,
        config.beta_y, z_theta, z_mu, g_tau, g_tau_y, mcmc.burn_in, mcmc.thin,
    )


def fit_cluster_bhm_normal(
    trial: NormalTrialData,
    partition,
    alphas: Sequence[float],
    config: HierPriorConfig | None = None,
    mcmc: McmcConfig | None = None,
) -> PosteriorDraws:
    """Normal-endpoint hierarchy by conjugate Gibbs, outcome precision shared across subgroups."""
    config = config or HierPriorConfig()
    mcmc = mcmc or McmcConfig()
    labels = _labels_from(partition, len(trial))
    K = int(labels.max()) + 1
    alphas = _checked_alphas(alphas, K)
    parts = [
        _run_normal_chain(trial, labels, K, alphas, _rng(mcmc.seed, _NORMAL, c), config, mcmc,
                          update_hyper=True, mu_fixed=None, tau_fixed=None)
        for c in range(mcmc.chains)
    ]
    theta, mu, tau, tau_y = (np.concatenate([p[k] for p in parts]) for k in range(4))
    return PosteriorDraws(
        "normal", trial.labels, tuple(int(v) for v in labels), theta, mu, tau, np.ones(len(trial)), tau_y
    )


def noninformative_posteriors_normal(
    trial: NormalTrialData, config: HierPriorConfig | None = None, mcmc: McmcConfig | None = None
) -> list[SampleSet]:
    """Per-subgroup posteriors of theta_i under theta_i ~ N(mu0, 1/noninf_tau)."""
    config = config or HierPriorConfig()
    mcmc = mcmc or McmcConfig()
    m = len(trial)
    labels = np.arange(m)
    draws = [
        _run_normal_chain(trial, labels, m, np.ones(m), _rng(mcmc.seed, _NONINF, c), config, mcmc,
                          update_hyper=False, mu_fixed=config.mu0, tau_fixed=config.noninf_tau)[0]
        for c in range(mcmc.chains)
    ]
    theta = np.vstack(draws)
    return [SampleSet(theta[:, i], trial.labels[i]) for i in range(m)]


def _provenance(cluster_config, prior_config, mcmc, grid_points, extension) -> dict[str, Any]:
    from . import __version__

    return {
        "package_version": __version__,
        "clustering": _jsonable(asdict(cluster_config)),
        "prior": _jsonable(asdict(prior_config)),
        "mcmc": asdict(mcmc),
        "grid_points": grid_points,
        "grid_extension": extension,
        "seeds": {"clustering": cluster_config.seed, "mcmc": mcmc.seed},
    }


def _jsonable(d: dict) -> dict:
    return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in d.items()}


def _cluster_and_alphas(samples, cluster_config, prior_config, grid_points, extension):
    grid = build_common_grid(samples, grid_points, extension)
    densities = [density_from_samples(s, grid) for s in samples]
    clustering = optimal_partition(densities, cluster_config)
    alphas = tuple(borrowing_alpha(o, prior_config) for o in clustering.obi)
    return densities, clustering, alphas


def run_bhmoi_binary(
    trial: BinaryTrialData,
    cluster_config: ClusteringConfig | None = None,
    prior_config: HierPriorConfig | None = None,
    mcmc: McmcConfig | None = None,
    grid_points: int = 512,
    extension: float = 3.0,
) -> BhmoiResult:
    cluster_config = cluster_config or ClusteringConfig()
    prior_config = prior_config or HierPriorConfig()
    mcmc = mcmc or McmcConfig()
    samples = noninformative_posteriors_binary(trial, prior_config, mcmc)
    densities, clustering, alphas = _cluster_and_alphas(samples, cluster_config, prior_config, grid_points, extension)
    post = fit_cluster_bhm_binary(trial, clustering.partition, alphas, prior_config, mcmc)
    prov = _provenance(cluster_config, prior_config, mcmc, grid_points, extension)
    return BhmoiResult(clustering, alphas, post, densities, prov)


def run_bhmoi_normal(
    trial: NormalTrialData,
    cluster_config: ClusteringConfig | None = None,
    prior_config: HierPriorConfig | None = None,
    mcmc: McmcConfig | None = None,
    grid_points: int = 512,
    extension: float = 3.0,
) -> BhmoiResult:
    cluster_config = cluster_config or ClusteringConfig()
    prior_config = prior_config or HierPriorConfig()
    mcmc = mcmc or McmcConfig()
    samples = noninformative_posteriors_normal(trial, prior_config, mcmc)
    densities, clustering, alphas = _cluster_and_alphas(samples, cluster_config, prior_config, grid_points, extension)
    post = fit_cluster_bhm_normal(trial, clustering.partition, alphas, prior_config, mcmc)
    prov = _provenance(cluster_config, prior_config, mcmc, grid_points, extension)
    return BhmoiResult(clustering, alphas, post, densities, prov)
