"""Result tables and plots: delimited text for every artefact, SVG line charts
for discovery curves and SR versus budget."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .runner import SuiteResult

TABLE_HEADER = ("method", "budget", "n", "mean", "sd", "cell", "complete")
CURVE_HEADER = ("method", "budget", "step", "mean_R", "sd_R", "n")


def format_cell(mean: float, sd: float, digits: int = 4) -> str:
    """``mean ± sd`` with a fixed number of decimals."""
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


def table_rows(results: SuiteResult | None) -> list[dict]:
    if results is None:
        return []
    rows = []
    for r in results.table():
        rows.append({**r, "cell": format_cell(r["mean"], r["sd"]) if r["n"] else "n/a"})
    return rows


def write_table(results: SuiteResult | None, path) -> Path:
    """SR table with one row per (method, budget) cell; header only when empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, TABLE_HEADER, extrasaction="ignore")
        w.writeheader()
        for row in table_rows(results):
            w.writerow(row)
    return path


def mean_curve(curves: dict) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sd of cumulative-discovery curves over seeds (truncated to the shortest)."""
    seqs = [np.asarray(c, dtype=float) for c in curves.values() if len(c)]
    if not seqs:
        return np.zeros(0), np.zeros(0)
    n = min(len(c) for c in seqs)
    arr = np.stack([c[:n] for c in seqs])
    return arr.mean(axis=0), arr.std(axis=0)


def curve_rows(results: SuiteResult | None) -> list[dict]:
    rows = []
    if results is None:
        return rows
    for m in results.methods:
        for b in results.budgets:
            curves = results.curves.get((m, b), {})
            mean, sd = mean_curve(curves)
            for t, (mu, s) in enumerate(zip(mean, sd)):
                rows.append({"method": m, "budget": b, "step": t + 1, "mean_R": float(mu),
                             "sd_R": float(s), "n": len(curves)})
    return rows


def write_curves(results: SuiteResult | None, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_HEADER)
        w.writeheader()
        for row in curve_rows(results):
            w.writerow(row)
    return path


def _line_chart(series, path, xlabel, ylabel, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, xs, ys in series:
        ax.plot(xs, ys, label=label, marker="o" if len(xs) < 12 else None)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_plots(results: SuiteResult | None, out_dir) -> list[Path]:
    """Write SR table, mean discovery curves and their SVG charts into *out_dir*.

    Legend order follows ``results.methods``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    files = [write_table(results, out / "sr_table.csv"), write_curves(results, out / "curves.csv")]
    methods = results.methods if results is not None else []
    budgets = results.budgets if results is not None else []

    sr_series = []
    for m in methods:
        xs = [b for b in budgets if results.cell(m, b).size]
        sr_series.append((m, xs, [float(results.cell(m, b).mean()) for b in xs]))
    sr_svg = out / "sr_vs_budget.svg"
    _line_chart(sr_series, sr_svg, "budget B", "success rate", "SR vs budget")
    files.append(sr_svg)

    for b in budgets:
        series = []
        for m in methods:
            mean, _ = mean_curve(results.curves.get((m, b), {}))
            series.append((m, list(range(1, len(mean) + 1)), list(mean)))
        svg = out / f"discovery_B{b}.svg"
        _line_chart(series, svg, "query step", "cumulative targets found", f"discovery, B={b}")
        files.append(svg)
    return files
