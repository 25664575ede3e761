"""File formats: trial CSVs, config files, versioned result JSON and density CSVs.

Every result document carries ``schema_version`` and ``kind`` and is validated
against :data:`RESULT_SCHEMA` before it is written and after it is read. All
writes go to a temporary file in the target directory that is then renamed
into place, so a reader never sees a half-written file.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import jsonschema
import numpy as np

from .clustering import ClusteringConfig, ClusteringResult
from .density import GriddedDensity, SampleSet
from .engine import BhmoiResult, BinaryTrialData, HierPriorConfig, McmcConfig, NormalTrialData, _jsonable
from .trialsim import DecisionRule, StudyConfig, StudyResult, study_manifest

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "SCHEMA_VERSION",
    "RESULT_SCHEMA",
    "CsvFormatError",
    "SchemaError",
    "read_binary_csv",
    "read_normal_csv",
    "read_samples_csv",
    "load_config",
    "build_study_config",
    "atomic_write_text",
    "atomic_write_bytes",
    "dump_json",
    "write_result",
    "load_result",
    "clustering_document",
    "fit_document",
    "sweep_document",
    "study_document",
    "calibration_document",
    "write_density_csv",
    "write_rows_csv",
    "och_rows",
    "oce_rows",
]

SCHEMA_VERSION = "1.0"

_NUM = {"type": "number"}
_NUM_LIST = {"type": "array", "items": _NUM}
_GRID = {
    "type": "object",
    "required": ["lower", "upper", "points", "discrete"],
    "properties": {
        "lower": _NUM,
        "upper": _NUM,
        "points": {"type": "integer", "minimum": 1},
        "discrete": {"type": "boolean"},
    },
}
_CLUSTER = {
    "type": "object",
    "required": ["id", "members", "size", "obi"],
    "properties": {
        "id": {"type": "integer", "minimum": 1},
        "members": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "size": {"type": "integer", "minimum": 1},
        "obi": {"type": "number", "minimum": 0, "maximum": 1},
        "alpha": _NUM,
    },
}
_CLUSTERING = {
    "type": "object",
    "required": ["a", "weight_mode", "K", "assignments", "clusters", "oci", "oci_by_k", "wkm_objective"],
    "properties": {
        "a": _NUM,
        "weight_mode": {"enum": ["uniform", "proportional"]},
        "K": {"type": "integer", "minimum": 1},
        "assignments": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "clusters": {"type": "array", "items": _CLUSTER, "minItems": 1},
        "oci": _NUM,
        "oci_by_k": {"type": "object", "additionalProperties": _NUM},
        "wkm_objective": _NUM,
    },
}
_DENSITIES = {
    "type": "object",
    "required": ["grid", "values", "cluster_means"],
    "properties": {
        "grid": _GRID,
        "values": {"type": "array", "items": _NUM_LIST},
        "cluster_means": {"type": "array", "items": _NUM_LIST},
    },
}

RESULT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["schema_version", "kind", "package_version"],
    "properties": {
        "schema_version": {"type": "string"},
        "kind": {"enum": ["clustering", "fit", "sweep", "study", "calibration"]},
        "package_version": {"type": "string"},
    },
    "allOf": [
        {
            "if": {"properties": {"kind": {"const": "clustering"}}},
            "then": {
                "required": ["labels", "clustering", "densities", "config"],
                "properties": {"clustering": _CLUSTERING, "densities": _DENSITIES},
            },
        },
        {
            "if": {"properties": {"kind": {"const": "fit"}}},
            "then": {
                "required": ["labels", "endpoint", "clustering", "densities", "alphas", "posterior", "provenance"],
                "properties": {
                    "clustering": _CLUSTERING,
                    "densities": _DENSITIES,
                    "endpoint": {"enum": ["binary", "normal"]},
                    "alphas": _NUM_LIST,
                    "posterior": {"type": "array", "items": {"type": "object"}},
                },
            },
        },
        {
            "if": {"properties": {"kind": {"const": "sweep"}}},
            "then": {
                "required": ["labels", "sweep", "densities", "config"],
                "properties": {"sweep": {"type": "array", "items": _CLUSTERING, "minItems": 1}, "densities": _DENSITIES},
            },
        },
        {
            "if": {"properties": {"kind": {"const": "study"}}},
            "then": {"required": ["characteristics", "manifest"]},
        },
        {
            "if": {"properties": {"kind": {"const": "calibration"}}},
            "then": {"required": ["cutoff", "method", "scenario", "target_alpha", "replications", "seed"]},
        },
    ],
}


class CsvFormatError(ValueError):
    """Malformed input CSV; the message starts with ``path:line:``."""


class SchemaError(ValueError):
    """Result document with the wrong schema version or shape."""


# ---------------------------------------------------------------- CSV input


def _csv_rows(path: str | os.PathLike, required: Sequence[str]):
    """Yield (line number, row dict) for each data row, checking the header."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise CsvFormatError(f"{path}: cannot read file ({exc.strerror})") from exc
    reader = csv.reader(io.StringIO(text))
    header = None
    for line_no, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row) or row[0].lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in row]
        if header is None:
            header = cells
            missing = [c for c in required if c not in header]
            if missing:
                raise CsvFormatError(f"{path}:{line_no}: header lacks column(s) {', '.join(missing)}")
            continue
        if len(cells) != len(header):
            raise CsvFormatError(f"{path}:{line_no}: expected {len(header)} fields, found {len(cells)}")
        yield line_no, dict(zip(header, cells))
    if header is None:
        raise CsvFormatError(f"{path}:1: file is empty")


def _parse_int(path, line_no, name, text) -> int:
    try:
        return int(text)
    except ValueError:
        raise CsvFormatError(f"{path}:{line_no}: {name} must be an integer, got {text!r}") from None


def _parse_float(path, line_no, name, text) -> float:
    try:
        v = float(text)
    except ValueError:
        raise CsvFormatError(f"{path}:{line_no}: {name} must be a number, got {text!r}") from None
    if not math.isfinite(v):
        raise CsvFormatError(f"{path}:{line_no}: {name} must be finite, got {text!r}")
    return v


def read_binary_csv(path: str | os.PathLike) -> BinaryTrialData:
    """Binary trial data, one row per subgroup: ``subgroup_id,responses,size``."""
    labels, y, n = [], [], []
    for line_no, row in _csv_rows(path, ("subgroup_id", "responses", "size")):
        lab = row["subgroup_id"]
        if not lab:
            raise CsvFormatError(f"{path}:{line_no}: empty subgroup_id")
        if lab in labels:
            raise CsvFormatError(f"{path}:{line_no}: duplicate subgroup_id {lab!r}")
        yi = _parse_int(path, line_no, "responses", row["responses"])
        ni = _parse_int(path, line_no, "size", row["size"])
        if ni < 1 or not 0 <= yi <= ni:
            raise CsvFormatError(f"{path}:{line_no}: need 0 <= responses <= size and size >= 1, got {yi}/{ni}")
        labels.append(lab)
        y.append(yi)
        n.append(ni)
    if not labels:
        raise CsvFormatError(f"{path}: no data rows")
    return BinaryTrialData(y, n, labels)


def read_normal_csv(path: str | os.PathLike) -> NormalTrialData:
    """Continuous outcomes, one row per patient: ``subgroup_id,outcome``.

    Subgroups keep the order in which they first appear.
    """
    groups: dict[str, list[float]] = {}
    for line_no, row in _csv_rows(path, ("subgroup_id", "outcome")):
        lab = row["subgroup_id"]
        if not lab:
            raise CsvFormatError(f"{path}:{line_no}: empty subgroup_id")
        groups.setdefault(lab, []).append(_parse_float(path, line_no, "outcome", row["outcome"]))
    if not groups:
        raise CsvFormatError(f"{path}: no data rows")
    return NormalTrialData(tuple(groups.values()), tuple(groups))


def read_samples_csv(path: str | os.PathLike) -> list[SampleSet]:
    """Posterior draws in long format: ``subgroup_id,draw``."""
    groups: dict[str, list[float]] = {}
    for line_no, row in _csv_rows(path, ("subgroup_id", "draw")):
        lab = row["subgroup_id"]
        if not lab:
            raise CsvFormatError(f"{path}:{line_no}: empty subgroup_id")
        groups.setdefault(lab, []).append(_parse_float(path, line_no, "draw", row["draw"]))
    if not groups:
        raise CsvFormatError(f"{path}: no data rows")
    return [SampleSet(np.array(v), k) for k, v in groups.items()]


# ---------------------------------------------------------------- configs

_SECTIONS = {"clustering": ClusteringConfig, "prior": HierPriorConfig, "mcmc": McmcConfig, "rule": DecisionRule}
_STUDY_KEYS = {"reps", "scenarios", "methods", "workers", "grid_points", "grid_extension", "a", "uniform_rates"}


def load_config(path: str | os.PathLike | None) -> dict[str, Any]:
    """Read a JSON or TOML config file (by extension) and check its section names."""
    if path is None:
        return {}
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ValueError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a table/object at top level")
    allowed = set(_SECTIONS) | {"study"}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown config section(s) {', '.join(sorted(unknown))}")
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        known = {f.name for f in fields(cls)}
        bad = set(section) - known
        if bad:
            raise ValueError(f"{path}: unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
    bad = set(data.get("study", {})) - _STUDY_KEYS
    if bad:
        raise ValueError(f"{path}: unknown key(s) in [study]: {', '.join(sorted(bad))}")
    return data


def section(config: Mapping[str, Any], name: str, base=None, **overrides):
    """Build the dataclass of section ``name`` from a loaded config plus overrides."""
    cls = _SECTIONS[name]
    values = asdict(base) if base is not None else {}
    values.update(config.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def build_study_config(config: Mapping[str, Any], seed: int | None = None) -> StudyConfig:
    study = config.get("study", {})
    return StudyConfig(
        prior=section(config, "prior"),
        mcmc=section(config, "mcmc", seed=seed),
        clustering=section(config, "clustering", seed=seed),
        rule=section(config, "rule"),
        grid_points=int(study.get("grid_points", 512)),
        grid_extension=float(study.get("grid_extension", 3.0)),
    )


# ---------------------------------------------------------------- writing


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(doc: Mapping[str, Any]) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, default=_default, sort_keys=True, indent=2, allow_nan=False) + "\n"


def validate_result(doc: Mapping[str, Any]) -> None:
    version = doc.get("schema_version") if isinstance(doc, Mapping) else None
    if version != SCHEMA_VERSION:
        raise SchemaError(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION!r})")
    try:
        jsonschema.validate(doc, RESULT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"invalid result document at {where}: {exc.message}") from None


def write_result(path: str | os.PathLike, doc: Mapping[str, Any]) -> None:
    text = dump_json(doc)
    validate_result(json.loads(text))
    atomic_write_text(path, text)


def load_result(path: str | os.PathLike) -> dict[str, Any]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read result ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: not valid JSON: {exc.msg}") from exc
    try:
        validate_result(doc)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return doc


# ---------------------------------------------------------------- documents


def _envelope(kind: str) -> dict[str, Any]:
    from . import __version__

    return {"schema_version": SCHEMA_VERSION, "kind": kind, "package_version": __version__}


def _clustering_part(result: ClusteringResult, labels: Sequence[str], alphas: Sequence[float] | None = None):
    part = result.partition
    clusters = []
    for m in range(part.K):
        entry = {
            "id": m + 1,
            "members": [labels[i] for i in part.members(m)],
            "size": part.cluster_sizes[m],
            "obi": result.obi[m],
        }
        if alphas is not None:
            entry["alpha"] = alphas[m]
        clusters.append(entry)
    return {
        "a": result.a,
        "weight_mode": result.weight_mode.value,
        "K": part.K,
        "assignments": list(part.assignments),
        "clusters": clusters,
        "oci": result.oci,
        "oci_by_k": {str(k): v for k, v in result.oci_by_k.items()},
        "wkm_objective": result.wkm_objective,
    }


def _densities_part(densities: Sequence[GriddedDensity], result: ClusteringResult) -> dict[str, Any]:
    g = densities[0].grid
    return {
        "grid": {"lower": g.lower, "upper": g.upper, "points": g.points, "discrete": g.discrete},
        "values": [d.values for d in densities],
        "cluster_means": [m.values for m in result.partition.cluster_means],
    }


def clustering_document(
    result: ClusteringResult, densities: Sequence[GriddedDensity], labels: Sequence[str], config: Mapping[str, Any]
) -> dict[str, Any]:
    doc = _envelope("clustering")
    doc.update(
        labels=list(labels),
        clustering=_clustering_part(result, labels),
        densities=_densities_part(densities, result),
        config=dict(config),
    )
    return doc


def fit_document(result: BhmoiResult, threshold: float | None = None) -> dict[str, Any]:
    post = result.posteriors
    doc = _envelope("fit")
    doc.update(
        labels=list(post.labels),
        endpoint=post.endpoint,
        clustering=_clustering_part(result.clustering, post.labels, result.alphas),
        densities=_densities_part(result.densities, result.clustering),
        alphas=list(result.alphas),
        posterior=post.summary(threshold=threshold),
        retained_draws=int(post.theta.shape[0]),
        provenance=result.provenance,
    )
    return doc


def sweep_document(
    results: Sequence[ClusteringResult],
    densities: Sequence[GriddedDensity],
    labels: Sequence[str],
    config: Mapping[str, Any],
) -> dict[str, Any]:
    doc = _envelope("sweep")
    doc.update(
        labels=list(labels),
        sweep=[_clustering_part(r, labels) for r in results],
        densities=_densities_part(densities, results[0]),
        config=dict(config),
    )
    return doc


def study_document(result: StudyResult) -> dict[str, Any]:
    doc = _envelope("study")
    doc.update(characteristics=[oc.as_dict() for oc in result.characteristics], manifest=study_manifest(result))
    return doc


def calibration_document(
    cutoff: float, method: str, scenario: str, target_alpha: float, reps: int, seed: int, config: StudyConfig
) -> dict[str, Any]:
    doc = _envelope("calibration")
    doc.update(
        cutoff=cutoff,
        method=method,
        scenario=scenario,
        target_alpha=target_alpha,
        replications=reps,
        seed=seed,
        config={
            "prior": _jsonable(asdict(config.prior)),
            "mcmc": asdict(config.mcmc),
            "clustering": _jsonable(asdict(config.clustering)),
            "p_null": config.rule.p_null,
        },
    )
    return doc


# ---------------------------------------------------------------- CSV output


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_density_csv(
    path: str | os.PathLike, t: np.ndarray, columns: Sequence[np.ndarray], names: Sequence[str]
) -> None:
    """Grid points in the first column, one density per further column."""
    rows = zip(t, *columns)
    write_rows_csv(path, ["t", *names], rows)


def och_rows(result: StudyResult) -> tuple[list[str], list[list[Any]]]:
    """Rejection rates laid out one row per (scenario, method), one column per subgroup."""
    labels = max((oc.labels for oc in result.characteristics), key=len)
    rows = []
    for oc in result.characteristics:
        if oc.rejection_rate is None:
            continue
        rows.append([oc.scenario, oc.method, *oc.rejection_rate, *[""] * (len(labels) - len(oc.labels))])
    return ["scenario", "method", *labels], rows


def oce_rows(result: StudyResult) -> tuple[list[str], list[list[Any]]]:
    rows = []
    for oc in result.characteristics:
        for lab, rate, mse, bias in zip(oc.labels, oc.true_rates, oc.mse, oc.bias):
            rows.append([oc.scenario, oc.method, lab, rate, mse, bias])
    return ["scenario", "method", "subgroup", "true_rate", "mse", "bias"], rows
