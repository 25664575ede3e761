"""Command-line interface.

Every subcommand writes its outputs under ``--out``. Randomness comes from
``--seed`` only (default 12345). Settings are resolved as built-in defaults,
then the ``--config`` file (JSON or TOML), then explicit flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .clustering import ClusteringConfig, WeightMode, optimal_partition, partition_path, select_partition
from .density import build_common_grid, density_from_samples
from .engine import (
    BinaryTrialData,
    McmcConfig,
    SlopeFunction,
    _jsonable,
    noninformative_posteriors_binary,
    noninformative_posteriors_normal,
    run_bhmoi_binary,
    run_bhmoi_normal,
)
from .fixtures import FIXTURES, load_fixture
from .formats import (
    CsvFormatError,
    SchemaError,
    build_study_config,
    calibration_document,
    clustering_document,
    fit_document,
    load_config,
    load_result,
    och_rows,
    oce_rows,
    read_binary_csv,
    read_normal_csv,
    read_samples_csv,
    section,
    study_document,
    sweep_document,
    atomic_write_text,
    dump_json,
    write_density_csv,
    write_result,
    write_rows_csv,
)
from .report import ReportError, render_report
from .trialsim import (
    CalibrationError,
    ComparatorMethod,
    StudyError,
    calibrate_cutoff,
    resolve_workers,
    run_study,
    scenario,
    study_manifest,
    uniform_rate_scenario,
)

DEFAULT_SEED = 12345

log = logging.getLogger("bhmoi")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--config", type=Path, help="JSON or TOML config file")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default {DEFAULT_SEED})")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _input_args(p: argparse.ArgumentParser, samples: bool = False) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="trial CSV")
    src.add_argument("--fixture", choices=sorted(FIXTURES), help="bundled example trial")
    if samples:
        src.add_argument("--samples", type=Path, help="posterior draws CSV (subgroup_id,draw)")
    p.add_argument("--endpoint", choices=["binary", "normal"], default="binary")
    p.add_argument(
        "--mcmc-preset",
        choices=["reporting", "simulation"],
        default="reporting",
        help="long multi-chain run (default) or the fast per-replication setting",
    )
    p.add_argument("--grid-points", type=int, default=512)


def _clustering_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weight-mode", choices=[m.value for m in WeightMode])
    p.add_argument("--b", type=float)
    p.add_argument("--k-max", type=int)
    p.add_argument("--restarts", type=int)


def _prior_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--slope", choices=[s.value for s in SlopeFunction])
    p.add_argument("--noninf-tau", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhmoi", description="Overlap-index clustering and borrowing for subgroup data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="cluster subgroup posteriors by maximizing OCI")
    _common(p)
    _input_args(p, samples=True)
    p.add_argument("--a", type=float)
    _clustering_args(p)
    p.add_argument("--noninf-tau", type=float)

    p = sub.add_parser("sweep", help="selected partition over a range of a values")
    _common(p)
    _input_args(p, samples=True)
    p.add_argument("--a-values", type=_float_list, default=[round(0.05 * i, 2) for i in range(1, 21)])
    _clustering_args(p)
    p.add_argument("--noninf-tau", type=float)

    p = sub.add_parser("fit", help="full pipeline: cluster, map OBI to borrowing, fit the hierarchy")
    _common(p)
    _input_args(p)
    p.add_argument("--a", type=float)
    _clustering_args(p)
    _prior_args(p)
    p.add_argument("--threshold", type=float, help="report Pr(rate > threshold) per subgroup")

    p = sub.add_parser("simulate", help="simulation study over scenarios and methods")
    _common(p)
    p.add_argument("--scenarios", type=_int_list, help="scenario numbers 1-6 (default all)")
    p.add_argument("--methods", help="comma-separated methods (default all)")
    p.add_argument("--reps", type=int)
    p.add_argument("--workers", type=int, help="worker processes (overrides BHMOI_WORKERS)")
    p.add_argument("--uniform-rates", action="store_true", help="draw rates per replication from level ranges")
    p.add_argument("--cutoff", type=float)
    p.add_argument("--p-null", type=float)

    p = sub.add_parser("calibrate", help="smallest cutoff meeting a type I target under a null scenario")
    _common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--scenario", type=int, default=6)
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--p-null", type=float)

    p = sub.add_parser("report", help="SVG plots and a markdown summary from result files")
    _common(p)
    p.add_argument("results", nargs="+", type=Path)
    return parser


# ---------------------------------------------------------------- helpers


def _seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("mcmc", {}).get("seed", DEFAULT_SEED))


def _load_binary(args) -> BinaryTrialData:
    if args.fixture:
        return load_fixture(args.fixture)
    return read_binary_csv(args.data)


def _load_trial(args):
    if args.fixture or args.endpoint == "binary":
        return _load_binary(args)
    return read_normal_csv(args.data)


def _mcmc(args, config, seed) -> McmcConfig:
    base = McmcConfig.reporting(seed) if args.mcmc_preset == "reporting" else McmcConfig(seed=seed)
    return section(config, "mcmc", base=base, seed=seed)


def _cluster_config(args, config, seed, a=None) -> ClusteringConfig:
    return section(
        config, "clustering",
        a=a, weight_mode=args.weight_mode, b=args.b, k_max=args.k_max, restarts=args.restarts, seed=seed,
    )


def _prior(args, config):
    return section(
        config, "prior",
        beta=getattr(args, "beta", None), alpha_min=getattr(args, "alpha_min", None),
        alpha_max=getattr(args, "alpha_max", None), slope=getattr(args, "slope", None),
        noninf_tau=getattr(args, "noninf_tau", None),
    )


def _densities(args, config, seed):
    """Per-subgroup densities on a common grid, from raw draws or from non-informative fits."""
    if getattr(args, "samples", None):
        samples = read_samples_csv(args.samples)
    else:
        trial = _load_trial(args)
        prior, mcmc = _prior(args, config), _mcmc(args, config, seed)
        if isinstance(trial, BinaryTrialData):
            samples = noninformative_posteriors_binary(trial, prior, mcmc)
        else:
            samples = noninformative_posteriors_normal(trial, prior, mcmc)
    grid = build_common_grid(samples, args.grid_points)
    return [density_from_samples(s, grid) for s in samples], [s.label for s in samples]


def _write_densities(out: Path, densities, labels, partition) -> None:
    t = densities[0].grid.t
    write_density_csv(out / "densities" / "subgroups.csv", t, [d.values for d in densities], labels)
    names = [f"cluster{m + 1}" for m in range(partition.K)]
    write_density_csv(out / "densities" / "cluster_means.csv", t, [d.values for d in partition.cluster_means], names)


def _settings(cluster_config=None, prior=None, mcmc=None, **extra) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if cluster_config is not None:
        out["clustering"] = _jsonable(asdict(cluster_config))
    if prior is not None:
        out["prior"] = _jsonable(asdict(prior))
    if mcmc is not None:
        out["mcmc"] = asdict(mcmc)
    out.update(extra)
    return out


# ---------------------------------------------------------------- commands


def cmd_cluster(args, config) -> None:
    seed = _seed(args, config)
    cc = _cluster_config(args, config, seed, a=args.a)
    densities, labels = _densities(args, config, seed)
    result = optimal_partition(densities, cc)
    input_mcmc = None if args.samples else _mcmc(args, config, seed)
    settings = _settings(cc, None if args.samples else _prior(args, config), input_mcmc, grid_points=args.grid_points)
    write_result(args.out / "result.json", clustering_document(result, densities, labels, settings))
    _write_densities(args.out, densities, labels, result.partition)
    write_rows_csv(args.out / "oci_by_k.csv", ["K", "oci"], sorted(result.oci_by_k.items()))
    log.info("K=%d, OCI=%.4f", result.partition.K, result.oci)


def cmd_sweep(args, config) -> None:
    seed = _seed(args, config)
    a_values = sorted(set(args.a_values))
    if not a_values:
        raise ValueError("no a values given")
    cc = _cluster_config(args, config, seed, a=a_values[0])
    densities, labels = _densities(args, config, seed)
    path = partition_path(densities, cc)
    results = [select_partition(densities, path, a, cc.weight_mode, cc.b) for a in a_values]
    settings = _settings(cc, None if args.samples else _prior(args, config),
                         None if args.samples else _mcmc(args, config, seed), grid_points=args.grid_points)
    write_result(args.out / "result.json", sweep_document(results, densities, labels, settings))
    write_rows_csv(
        args.out / "sweep.csv",
        ["a", "K", "oci", "mean_obi", "assignments"],
        [[r.a, r.partition.K, r.oci, float(np.mean(r.obi)), " ".join(str(v + 1) for v in r.partition.assignments)]
         for r in results],
    )
    _write_densities(args.out, densities, labels, results[0].partition)


def cmd_fit(args, config) -> None:
    seed = _seed(args, config)
    cc = _cluster_config(args, config, seed, a=args.a)
    prior, mcmc = _prior(args, config), _mcmc(args, config, seed)
    trial = _load_trial(args)
    run = run_bhmoi_binary if isinstance(trial, BinaryTrialData) else run_bhmoi_normal
    result = run(trial, cc, prior, mcmc, grid_points=args.grid_points)
    write_result(args.out / "result.json", fit_document(result, args.threshold))
    summary = result.posteriors.summary(threshold=args.threshold)
    cols = ["label", "cluster", "mean", "sd", "lower", "upper", "acceptance"] + (
        ["prob_exceeds"] if args.threshold is not None else []
    )
    write_rows_csv(
        args.out / "posterior.csv", ["subgroup_id", *cols[1:]],
        [[r[c] + 1 if c == "cluster" else r[c] for c in cols] for r in summary],
    )
    part = result.clustering.partition
    write_rows_csv(
        args.out / "clusters.csv", ["cluster", "size", "obi", "alpha", "members"],
        [[m + 1, part.cluster_sizes[m], result.clustering.obi[m], result.alphas[m],
          " ".join(result.posteriors.labels[i] for i in part.members(m))] for m in range(part.K)],
    )
    _write_densities(args.out, result.densities, list(result.posteriors.labels), part)


def _study_inputs(args, config):
    study = config.get("study", {})
    numbers = args.scenarios or study.get("scenarios") or [1, 2, 3, 4, 5, 6]
    a_over = {int(k): float(v) for k, v in study.get("a", {}).items()}
    uniform = args.uniform_rates or bool(study.get("uniform_rates", False))
    make = uniform_rate_scenario if uniform else scenario
    specs = [make(int(k), a=a_over.get(int(k))) for k in numbers]
    reps = args.reps if args.reps is not None else int(study.get("reps", 500))
    workers = args.workers if args.workers is not None else study.get("workers")
    return specs, reps, resolve_workers(workers)


def cmd_simulate(args, config) -> None:
    seed = _seed(args, config)
    specs, reps, workers = _study_inputs(args, config)
    methods_text = args.methods or ",".join(config.get("study", {}).get("methods", [m.value for m in ComparatorMethod]))
    methods = [ComparatorMethod.parse(m) for m in methods_text.split(",") if m.strip()]
    cfg = build_study_config(config, seed)
    cfg = replace(cfg, rule=section(config, "rule", cutoff=args.cutoff, p_null=args.p_null))
    result = run_study(specs, methods, reps, seed, cfg, workers)
    write_result(args.out / "result.json", study_document(result))
    write_rows_csv(args.out / "och.csv", *och_rows(result))
    write_rows_csv(args.out / "oce.csv", *oce_rows(result))
    atomic_write_text(args.out / "manifest.json", dump_json(study_manifest(result)))
    for oc in result.characteristics:
        log.info("%s %s mean MSE %.5f", oc.scenario, oc.method, oc.mean_mse)


def cmd_calibrate(args, config) -> None:
    seed = _seed(args, config)
    study = config.get("study", {})
    reps = args.reps if args.reps is not None else int(study.get("reps", 500))
    workers = resolve_workers(args.workers if args.workers is not None else study.get("workers"))
    method = ComparatorMethod.parse(args.method)
    spec = scenario(args.scenario)
    cfg = build_study_config(config, seed)
    cfg = replace(cfg, rule=section(config, "rule", p_null=args.p_null))
    cutoff = calibrate_cutoff(method, spec, args.target, reps, seed, cfg, workers)
    doc = calibration_document(cutoff, method.value, spec.name, args.target, reps, seed, cfg)
    write_result(args.out / "result.json", doc)
    print(f"cutoff {cutoff:.2f}", flush=True)


def cmd_report(args, config) -> None:
    docs = []
    used = set()
    for path in args.results:
        doc = load_result(path)
        name = path.parent.name if path.name == "result.json" and path.parent.name else path.stem
        base, k = name, 2
        while name in used:
            name, k = f"{base}{k}", k + 1
        used.add(name)
        docs.append((name, doc))
    svgs, md = render_report(docs)
    for fname, svg in sorted(svgs.items()):
        atomic_write_text(args.out / "plots" / fname, svg)
    atomic_write_text(args.out / "summary.md", md)


COMMANDS = {
    "cluster": cmd_cluster,
    "sweep": cmd_sweep,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}

_USER_ERRORS = (CsvFormatError, SchemaError, ReportError, StudyError, CalibrationError, ValueError, OSError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        config = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, config)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
