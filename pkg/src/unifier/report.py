"""Summary CSV and per-scenario SVG line charts built from run records."""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from xml.sax.saxutils import escape

from .harness import METRICS, aggregate

MODE_COLORS = {
    "unifier": "#d62728",
    "finetune": "#1f77b4",
    "joint": "#2ca02c",
    "zero_shot": "#7f7f7f",
}
SUMMARY_COLUMNS = ("mode", "seed", "scenario", "metric", "average", "last")


def summary_rows(records):
    """One row per (record, scenario, metric) holding the step average and last value."""
    rows = []
    for rec in sorted(records, key=lambda r: (r.mode, r.seed)):
        mean, last = aggregate(rec)
        for scen in sorted(mean):
            for metric in METRICS:
                rows.append({"mode": rec.mode, "seed": rec.seed, "scenario": scen, "metric": metric,
                             "average": mean[scen][metric], "last": last[scen][metric]})
    return rows


def summary_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in summary_rows(records):
        w.writerow([r["mode"], r["seed"], r["scenario"], r["metric"], repr(r["average"]), repr(r["last"])])
    return buf.getvalue()


def mode_curves(records, scenario, metric):
    """Per-mode ``[(step, value)]`` averaged over the seeds present for that mode."""
    acc = defaultdict(lambda: defaultdict(list))
    for rec in records:
        for row in rec.rows:
            if row["scenario"] == scenario:
                acc[rec.mode][row["step"]].append(row[metric])
    return {mode: [(t, sum(v) / len(v)) for t, v in sorted(steps.items())] for mode, steps in sorted(acc.items())}


def line_chart_svg(title, series, y_label="score", width=480, height=300, y_max=100.0):
    """Render ``{name: [(x, y), ...]}`` as a fixed-layout SVG string.

    Output depends only on the inputs, so identical data gives identical bytes.
    """
    left, right, top, bottom = 48, 110, 30, 40
    pw, ph = width - left - right, height - top - bottom
    xs = sorted({x for pts in series.values() for x, _ in pts}) or [1]
    x_lo, x_hi = xs[0], xs[-1]

    def px(x):
        return left + (pw * (x - x_lo) / (x_hi - x_lo) if x_hi > x_lo else pw / 2)

    def py(y):
        return top + ph * (1.0 - min(max(y, 0.0), y_max) / y_max)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for k in range(6):
        v = y_max * k / 5
        y = py(v)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{v:g}</text>')
    for x in xs:
        out.append(f'<text x="{px(x):.2f}" y="{top + ph + 16}" text-anchor="middle">{x}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">step</text>')
    out.append(
        f'<text x="12" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 12 {top + ph / 2:.1f})">{escape(y_label)}</text>'
    )
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = MODE_COLORS.get(name, "#000000")
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(records, out_dir):
    """Write ``summary.csv`` and one chart per scenario and metric; returns the paths."""
    if not records:
        raise ValueError("no run records to report")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    path = os.path.join(out_dir, "summary.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(summary_csv(records))
    paths.append(path)
    scenarios = sorted({row["scenario"] for rec in records for row in rec.rows})
    for scen in scenarios:
        for metric in METRICS:
            label = "VQA score" if metric == "vqa" else "F1"
            svg = line_chart_svg(f"{scen} {label}", mode_curves(records, scen, metric), y_label=label)
            path = os.path.join(out_dir, f"{scen}_{metric}.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
            paths.append(path)
    return paths
