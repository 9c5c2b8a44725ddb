"""Figure rendering: learning curves and parameter sweeps.

Rendering is deterministic: fixed figure geometry, the Agg backend, and
pinned PNG metadata, so identical inputs yield identical bytes.
"""

from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .io import read_compare_csv, read_run_csv

_SAVE_KW = {"dpi": 120, "metadata": {"Software": "plotkit"}}


@dataclass
class CurveSpec:
    """What to draw: runs grouped by (method, seed), test accuracy vs round."""

    csv_paths: list[str] = field(default_factory=list)
    out_path: str = "curves.png"
    reference: float | None = None
    title: str = "per-client test accuracy, mean over clients"


def _mean_test_accuracy_by_round(rows: list[dict]) -> dict[int, float]:
    per_round: dict[int, list[float]] = {}
    for r in rows:
        if r["split"] == "test":
            per_round.setdefault(r["round"], []).append(r["accuracy"])
    return {t: float(np.mean(v)) for t, v in sorted(per_round.items())}


def plot_curves(spec: CurveSpec) -> str:
    """One line per method (mean over seeds, +/-1 std band when >= 2 seeds)."""
    if not spec.csv_paths:
        raise DataError("no input CSVs")
    curves: dict[tuple[str, int], dict[int, float]] = {}
    for path in spec.csv_paths:
        rows = read_run_csv(path)
        for key, group in _group_by_method_seed(rows).items():
            curves[key] = _mean_test_accuracy_by_round(group)
    if not curves:
        raise DataError("inputs contain no test rows")

    methods: dict[str, list[dict[int, float]]] = {}
    for (method, _seed), curve in sorted(curves.items()):
        methods.setdefault(method, []).append(curve)

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for method in sorted(methods):
        seeds = methods[method]
        rounds = sorted(set.intersection(*(set(c) for c in seeds)))
        if not rounds:
            raise DataError(f"method {method}: no common rounds across seeds")
        stacked = np.array([[c[t] for t in rounds] for c in seeds])
        mean = stacked.mean(axis=0)
        line, = ax.plot(rounds, mean, label=method, linewidth=1.6)
        if len(seeds) >= 2:
            std = stacked.std(axis=0, ddof=1)
            ax.fill_between(rounds, mean - std, mean + std,
                            color=line.get_color(), alpha=0.2, linewidth=0)
    if spec.reference is not None:
        ax.axhline(spec.reference, linestyle=":", color="gray", linewidth=1.2,
                   label="reference")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_title(spec.title)
    ax.legend(loc="lower right", fontsize=9)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(spec.out_path, **_SAVE_KW)
    plt.close(fig)
    return spec.out_path


def _group_by_method_seed(rows: list[dict]) -> dict[tuple[str, int], list[dict]]:
    grouped: dict[tuple[str, int], list[dict]] = {}
    for r in rows:
        grouped.setdefault((r["method"], r["seed"]), []).append(r)
    return grouped


def plot_sweep(csv_path: str, x_field: str, out_path: str,
               reference: float | None = None) -> str:
    """Final accuracy against a swept parameter (L or W), one line per method."""
    rows = read_compare_csv(csv_path, x_field)
    methods: dict[str, list[dict]] = {}
    for r in rows:
        methods.setdefault(r["method"], []).append(r)

    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    for method in sorted(methods):
        pts = sorted(methods[method], key=lambda r: r["x"])
        xs = [p["x"] for p in pts]
        means = np.array([p["mean"] for p in pts])
        stds = np.array([p["std"] for p in pts])
        line, = ax.plot(xs, means, marker="o", markersize=4, linewidth=1.6,
                        label=method)
        ax.fill_between(xs, means - stds, means + stds,
                        color=line.get_color(), alpha=0.2, linewidth=0)
    if reference is not None:
        ax.axhline(reference, linestyle=":", color="gray", linewidth=1.2,
                   label="reference")
    ax.set_xlabel(x_field)
    ax.set_ylabel("final test accuracy")
    ax.set_title(f"accuracy vs {x_field}")
    ax.legend(loc="best", fontsize=9)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    return out_path
