"""SVG plots and a markdown summary rendered from result documents.

Output depends only on the document contents: numbers are printed with fixed
precision and elements are emitted in a fixed order, so identical input gives
byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from html import escape
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = ["Series", "line_chart", "render_report", "ReportError"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f")

WIDTH, HEIGHT = 760, 440
PLOT = (60, 30, 470, 380)  # left, top, right, bottom


class ReportError(ValueError):
    """Raised for documents that cannot be rendered."""


@dataclass(frozen=True)
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]
    color: str
    width: float = 1.5
    dashed: bool = False
    markers: bool = False


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * max(1.0, abs(hi)):
        out.append(float(np.round(v, 12)))
        v += step
    return out


def _label(v: float) -> str:
    return f"{v:.4g}"


def line_chart(
    series: Sequence[Series],
    title: str,
    xlabel: str,
    ylabel: str,
    table: Sequence[Sequence[str]] = (),
    legend: Sequence[tuple[str, str]] = (),
) -> str:
    """Polyline chart with axes, a colour legend and an optional text table on the right."""
    if not series:
        raise ReportError("nothing to plot")
    xs = np.concatenate([np.asarray(s.x, dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s.y, dtype=float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = min(0.0, float(ys.min())), float(ys.max())
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 <= y0:
        y1 = y0 + 1.0
    y1 += 0.05 * (y1 - y0)
    left, top, right, bottom = PLOT

    def px(v):
        return left + (v - x0) / (x1 - x0) * (right - left)

    def py(v):
        return bottom - (v - y0) / (y1 - y0) * (bottom - top)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{(left + right) / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="#333"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_f(px(t))}" y1="{bottom}" x2="{_f(px(t))}" y2="{bottom + 4}" stroke="#333"/>')
        out.append(f'<text x="{_f(px(t))}" y="{bottom + 16}" text-anchor="middle">{_label(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{_f(py(t))}" x2="{left}" y2="{_f(py(t))}" stroke="#333"/>')
        out.append(f'<text x="{left - 6}" y="{_f(py(t) + 4)}" text-anchor="end">{_label(t)}</text>')
    out.append(f'<text x="{(left + right) / 2:.1f}" y="{bottom + 34}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(top + bottom) / 2:.1f})">{escape(ylabel)}</text>'
    )
    for s in series:
        pts = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(s.x, s.y))
        dash = ' stroke-dasharray="6 3"' if s.dashed else ""
        out.append(
            f'<polyline fill="none" stroke="{s.color}" stroke-width="{s.width}"{dash} points="{pts}">'
            f"<title>{escape(s.name)}</title></polyline>"
        )
        if s.markers:
            for a, b in zip(s.x, s.y):
                out.append(f'<circle cx="{_f(px(a))}" cy="{_f(py(b))}" r="3" fill="{s.color}"/>')
    y = top + 10
    for name, color in legend:
        out.append(f'<rect x="{right + 16}" y="{y - 9}" width="12" height="10" fill="{color}"/>')
        out.append(f'<text x="{right + 34}" y="{y}">{escape(name)}</text>')
        y += 16
    y += 10
    for row in table:
        x = right + 16
        for j, cell in enumerate(row):
            out.append(f'<text x="{x}" y="{y}">{escape(cell)}</text>')
            x += 64 if j == 0 else 70
        y += 15
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _grid_t(dens: Mapping[str, Any]) -> np.ndarray:
    g = dens["grid"]
    if g["discrete"]:
        return g["lower"] + np.arange(g["points"], dtype=float)
    return np.linspace(g["lower"], g["upper"], g["points"])


def _density_chart(doc: Mapping[str, Any], part: Mapping[str, Any], title: str) -> str:
    clusters = part["clusters"]
    if not clusters:
        raise ReportError("result has an empty cluster list")
    labels = doc["labels"]
    dens = doc["densities"]
    t = _grid_t(dens)
    assign = part["assignments"]
    series = [
        Series(f"{labels[i]} (cluster {assign[i] + 1})", t, v, PALETTE[assign[i] % len(PALETTE)], 1.2)
        for i, v in enumerate(dens["values"])
    ]
    if len(dens["cluster_means"]) == len(clusters):
        series += [
            Series(f"cluster {m + 1} mean", t, v, PALETTE[m % len(PALETTE)], 2.5, dashed=True)
            for m, v in enumerate(dens["cluster_means"])
        ]
    has_alpha = all("alpha" in c for c in clusters)
    table = [["cluster", "size", "OBI"] + (["alpha"] if has_alpha else [])]
    for c in clusters:
        row = [str(c["id"]), str(c["size"]), f"{c['obi']:.3f}"]
        if has_alpha:
            row.append(f"{c['alpha']:.2f}")
        table.append(row)
    table.append([f"a={part['a']:.3g}", f"K={part['K']}", f"OCI={part['oci']:.3f}"])
    legend = [(f"cluster {c['id']}: " + ", ".join(c["members"])[:40], PALETTE[(c["id"] - 1) % len(PALETTE)]) for c in clusters]
    xlabel = "response rate" if doc.get("endpoint", "binary") == "binary" else "theta"
    return line_chart(series, title, xlabel, "density", table, legend)


def _oci_chart(part: Mapping[str, Any]) -> str:
    ks = sorted(int(k) for k in part["oci_by_k"])
    vals = [part["oci_by_k"][str(k)] for k in ks]
    s = Series("OCI", ks, vals, PALETTE[0], 2.0, markers=True)
    return line_chart([s], f"OCI by number of clusters (a={part['a']:.3g})", "K", "OCI", legend=[("OCI", PALETTE[0])])


def _sweep_chart(doc: Mapping[str, Any]) -> str:
    a = [p["a"] for p in doc["sweep"]]
    k = [p["K"] for p in doc["sweep"]]
    obi = [float(np.mean([c["obi"] for c in p["clusters"]])) for p in doc["sweep"]]
    table = [["a", "K", "mean OBI"]] + [[f"{x:.3g}", str(y), f"{z:.3f}"] for x, y, z in zip(a, k, obi)]
    return line_chart(
        [Series("selected K", a, k, PALETTE[0], 2.0, markers=True)],
        "Selected number of clusters across a", "a", "K", table[:20], [("K", PALETTE[0])],
    )


def _study_charts(doc: Mapping[str, Any]) -> dict[str, str]:
    by_scenario: dict[str, list[Mapping[str, Any]]] = {}
    for oc in doc["characteristics"]:
        by_scenario.setdefault(oc["scenario"], []).append(oc)
    out = {}
    for name in sorted(by_scenario):
        rows = by_scenario[name]
        series, legend, table = [], [], [["method", "mean MSE"]]
        for j, oc in enumerate(rows):
            color = PALETTE[j % len(PALETTE)]
            x = list(range(1, len(oc["mse"]) + 1))
            series.append(Series(oc["method"], x, oc["mse"], color, 1.8, markers=True))
            legend.append((oc["method"], color))
            table.append([oc["method"][:9], f"{float(np.mean(oc['mse'])):.5f}"])
        out[f"{name}_mse.svg"] = line_chart(series, f"MSE by subgroup, {name}", "subgroup", "MSE", table, legend)
    return out


def _md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def _clusters_md(part: Mapping[str, Any]) -> list[str]:
    has_alpha = all("alpha" in c for c in part["clusters"])
    header = ["cluster", "members", "OBI"] + (["alpha"] if has_alpha else [])
    rows = []
    for c in part["clusters"]:
        row = [str(c["id"]), ", ".join(c["members"]), f"{c['obi']:.4f}"]
        if has_alpha:
            row.append(f"{c['alpha']:.3f}")
        rows.append(row)
    return [f"a = {part['a']:.4g}, K = {part['K']}, OCI = {part['oci']:.4f}", ""] + _md_table(header, rows)


def render_report(docs: Sequence[tuple[str, Mapping[str, Any]]]) -> tuple[dict[str, str], str]:
    """Render (name, document) pairs into SVG files keyed by file name and a markdown summary."""
    if not docs:
        raise ReportError("no result documents given")
    svgs: dict[str, str] = {}
    md = ["# Result summary", ""]
    for name, doc in docs:
        kind = doc["kind"]
        md += [f"## {name} ({kind})", ""]
        if kind in ("clustering", "fit"):
            part = doc["clustering"]
            svgs[f"{name}_densities.svg"] = _density_chart(doc, part, f"{name}: densities by cluster")
            svgs[f"{name}_oci.svg"] = _oci_chart(part)
            md += _clusters_md(part)
            if kind == "fit":
                md += [""] + _md_table(
                    ["subgroup", "cluster", "mean", "95% interval"],
                    [
                        [r["label"], str(r["cluster"] + 1), f"{r['mean']:.4f}", f"[{r['lower']:.4f}, {r['upper']:.4f}]"]
                        for r in doc["posterior"]
                    ],
                )
        elif kind == "sweep":
            if any(not p["clusters"] for p in doc["sweep"]):
                raise ReportError(f"{name}: result has an empty cluster list")
            svgs[f"{name}_sweep.svg"] = _sweep_chart(doc)
            md += _md_table(
                ["a", "K", "partition"],
                [[f"{p['a']:.4g}", str(p["K"]), " ".join(str(v + 1) for v in p["assignments"])] for p in doc["sweep"]],
            )
        elif kind == "study":
            for fname, svg in _study_charts(doc).items():
                svgs[f"{name}_{fname}"] = svg
            rows = []
            for oc in doc["characteristics"]:
                rej = oc["rejection_rate"]
                rej_s = " ".join(f"{r:.3f}" for r in rej) if rej is not None else "n/a"
                rows.append([oc["scenario"], oc["method"], str(oc["replications"]), f"{float(np.mean(oc['mse'])):.5f}", rej_s])
            md += _md_table(["scenario", "method", "reps", "mean MSE", "rejection rate by subgroup"], rows)
        elif kind == "calibration":
            md.append(
                f"cutoff {doc['cutoff']:.2f} for {doc['method']} on {doc['scenario']} "
                f"(target type I {doc['target_alpha']}, {doc['replications']} replications)"
            )
        md.append("")
    return svgs, "\n".join(md).rstrip() + "\n"
