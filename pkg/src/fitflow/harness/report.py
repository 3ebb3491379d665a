"""Report schema, aggregation, chart data and figures."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from ..errors import FormatError

SCHEMA_VERSION = 1
METRICS = ("median_fitness", "diversity", "novelty")

_metric_report = {
    "type": "object",
    "required": ["median_fitness", "diversity", "novelty", "n_sequences", "seed", "target"],
    "properties": {
        "median_fitness": {"type": "number"},
        "diversity": {"type": "number"},
        "novelty": {"type": "number"},
        "n_sequences": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "target": {"type": "number"},
    },
    "additionalProperties": False,
}

_stat = {
    "type": "object",
    "required": ["mean", "std"],
    "properties": {"mean": {"type": ["number", "null"]}, "std": {"type": ["number", "null"]}},
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "schema_version", "config_hash", "landscape_id", "benchmark", "targets", "variants", "audit", "models",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "landscape_id": {"type": "string"},
        "benchmark": {
            "type": "object",
            "required": ["difficulty", "size", "min_gap", "fitness_window", "train_fitness"],
        },
        "targets": {"type": "object", "additionalProperties": {"type": "number"}},
        "calibration": {"type": "array"},
        "bootstrap": {"type": ["object", "null"]},
        "variants": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["target", "per_seed", "aggregate", "incomplete"],
                "properties": {
                    "target": {"type": "number"},
                    "per_seed": {"type": "array", "items": _metric_report},
                    "aggregate": {
                        "type": "object",
                        "required": list(METRICS),
                        "properties": {m: _stat for m in METRICS},
                    },
                    "incomplete": {"type": "object", "additionalProperties": {"type": "string"}},
                },
            },
        },
        "audit": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
        "models": {"type": "object"},
    },
}


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"report does not match schema v{SCHEMA_VERSION}: {exc.message}") from None


def aggregate(per_seed: Sequence[dict]) -> dict:
    """Mean and population standard deviation of each metric over seeds."""
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in per_seed], dtype=np.float64)
        out[m] = {
            "mean": float(vals.mean()) if len(vals) else None,
            "std": float(vals.std()) if len(vals) else None,
        }
    return out


def chart_rows(report: dict) -> list[dict]:
    rows = []
    for variant, v in report["variants"].items():
        for r in v["per_seed"]:
            rows.append({"variant": variant, "seed": r["seed"], "target": r["target"], **{m: r[m] for m in METRICS}})
    return rows


def chart_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "target", *METRICS])
    for r in chart_rows(report):
        w.writerow([r["variant"], r["seed"], repr(r["target"]), *(repr(r[m]) for m in METRICS)])
    return buf.getvalue()


def metric_table(report: dict) -> str:
    header = f"{'variant':<10} {'target':>8} {'seeds':>5}  " + "  ".join(f"{m:>20}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for variant, v in report["variants"].items():
        cells = []
        for m in METRICS:
            a = v["aggregate"][m]
            cells.append(f"{'n/a':>20}" if a["mean"] is None else f"{a['mean']:>11.4f} ± {a['std']:<6.4f}")
        lines.append(f"{variant:<10} {v['target']:>8.4f} {len(v['per_seed']):>5}  " + "  ".join(cells))
    if report["audit"]:
        lines.append("oracle calls by phase: " + ", ".join(f"{k}={n}" for k, n in sorted(report["audit"].items())))
    return "\n".join(lines)


def render_figures(report: dict, out_dir: Path) -> list[Path]:
    """Fitness against diversity and novelty per seed, and per-variant median fitness."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    rows = chart_rows(report)
    variants = list(report["variants"])
    colors = {v: plt.cm.viridis(i / max(len(variants) - 1, 1)) for i, v in enumerate(variants)}
    paths = []
    for other in ("diversity", "novelty"):
        fig, ax = plt.subplots(figsize=(5, 4))
        for v in variants:
            pts = [(r[other], r["median_fitness"]) for r in rows if r["variant"] == v]
            if pts:
                x, y = zip(*pts)
                ax.scatter(x, y, color=colors[v], label=v)
        ax.axhline(report["benchmark"]["train_fitness"]["max"], color="grey", ls="--", lw=1, label="train max")
        ax.set_xlabel(other)
        ax.set_ylabel("median fitness (top-k)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"fitness_vs_{other}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    means = [report["variants"][v]["aggregate"]["median_fitness"]["mean"] or 0.0 for v in variants]
    stds = [report["variants"][v]["aggregate"]["median_fitness"]["std"] or 0.0 for v in variants]
    ax.bar(variants, means, yerr=stds, color=[colors[v] for v in variants], capsize=4)
    ax.axhline(report["benchmark"]["train_fitness"]["max"], color="grey", ls="--", lw=1)
    ax.set_ylabel("median fitness, mean over seeds")
    fig.tight_layout()
    path = out_dir / "median_fitness_by_variant.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    paths.append(path)
    return paths
