"""Delimited summaries and bar charts for suite comparisons.

Two invocations over the same reports produce byte-identical CSVs: rows
are fully sorted, rates are exact integer ratios rendered with repr, and
no timestamps or machine details are written.
"""
from __future__ import annotations

import csv
import re
from pathlib import Path

from .suites import Report

_FLAGS = ("targeted", "picked", "success")


def _slug(label: str) -> str:
    s = re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_")
    return s or "variant"


def _summary_rows(reports: list[Report]) -> list[list]:
    rows = []
    for r in sorted(reports, key=lambda r: (r.variant, r.suite)):
        n = r.n_trials
        rows.append(
            [
                r.variant,
                r.suite,
                r.task_id,
                n,
                r.count("targeted"),
                r.count("picked"),
                r.count("success"),
                repr(r.count("targeted") / n),
                repr(r.count("picked") / n),
                repr(r.count("success") / n),
                repr(sum(t.steps_used for t in r.trials) / n),
                sum(t.consistency_failures for t in r.trials),
                r.count("tracking_lost"),
                r.config_hash,
            ]
        )
    return rows


def emit_report(reports: list[Report], out_dir: str | Path) -> list[Path]:
    """Write summary.csv, per-suite trial tables, charts, and raw JSON."""
    if not reports:
        raise ValueError("emit_report needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary = out / "summary.csv"
    with open(summary, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["variant", "suite", "task", "n_trials",
             "targeted", "picked", "success",
             "targeted_rate", "picked_rate", "success_rate",
             "mean_steps", "consistency_failures", "tracking_lost",
             "config_hash"]
        )
        w.writerows(_summary_rows(reports))
    written.append(summary)

    for suite in sorted({r.suite for r in reports}):
        p = out / f"trials_{suite}.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["variant", "trial", "targeted", "picked", "success",
                 "steps_used", "consistency_failures", "tracking_lost"]
            )
            for r in sorted(
                (r for r in reports if r.suite == suite),
                key=lambda r: r.variant,
            ):
                for i, t in enumerate(r.trials):
                    w.writerow(
                        [r.variant, i, int(t.targeted), int(t.picked),
                         int(t.success), t.steps_used,
                         t.consistency_failures, int(t.tracking_lost)]
                    )
        written.append(p)

    raw = out / "reports.json"
    import json

    raw.write_text(
        json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True)
    )
    written.append(raw)
    written.extend(_emit_charts(reports, out))
    return written


def _emit_charts(reports: list[Report], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    suites = sorted({r.suite for r in reports})
    variants = sorted({r.variant for r in reports})
    cell = {(r.variant, r.suite): r for r in reports}
    written: list[Path] = []

    # success-rate comparison across all (variant, suite) cells
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(suites), 3.6))
    width = 0.8 / len(variants)
    for vi, variant in enumerate(variants):
        xs, ys = [], []
        for si, suite in enumerate(suites):
            r = cell.get((variant, suite))
            if r is None:
                continue
            xs.append(si + (vi - (len(variants) - 1) / 2) * width)
            ys.append(r.success_rate)
        ax.bar(xs, ys, width=width * 0.95, label=variant)
    ax.set_xticks(range(len(suites)))
    ax.set_xticklabels(suites, rotation=15, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("success rate")
    ax.set_title("Success rate by suite")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / "success_rates.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    # staged-outcome breakdown per variant
    for variant in variants:
        fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(suites), 3.6))
        width = 0.8 / len(_FLAGS)
        for fi, flag in enumerate(_FLAGS):
            xs, ys = [], []
            for si, suite in enumerate(suites):
                r = cell.get((variant, suite))
                if r is None:
                    continue
                xs.append(si + (fi - (len(_FLAGS) - 1) / 2) * width)
                ys.append(r.rate(flag))
            ax.bar(xs, ys, width=width * 0.95, label=flag)
        ax.set_xticks(range(len(suites)))
        ax.set_xticklabels(suites, rotation=15, ha="right")
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("rate")
        ax.set_title(f"Staged outcomes: {variant}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        p = out / f"subgoals_{_slug(variant)}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written
