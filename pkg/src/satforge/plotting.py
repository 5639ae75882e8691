"""Figures rendered next to the report CSVs (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "font.size": 10,
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "satforge",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path


def plot_length_curves(curves: dict[str, dict[float, float]], path, ylabel: str, title: str = "") -> Path:
    """One line per series; x is the minimum utterance length in seconds."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in sorted(curves):
            pts = sorted(curves[name].items())
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", ms=3, label=name)
        ax.set_xlabel("minimum utterance length (s)")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if curves:
            ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_fer_curves(curves: dict[str, dict[float, float]], path) -> Path:
    return plot_length_curves(curves, path, "FER (%)", "frame error rate vs. minimum length")


def plot_eer_curves(curves: dict[str, dict[float, float]], path) -> Path:
    return plot_length_curves(curves, path, "EER (%)", "equal error rate vs. minimum length")


def plot_comparison(values: dict[str, float], path, ylabel: str = "eval FER (%)", baseline: str | None = None) -> Path:
    """Horizontal bars sorted best-first; the baseline bar is drawn hatched."""
    names = sorted(values, key=lambda k: (values[k], k))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.35 * max(len(names), 3) + 1.2))
        bars = ax.barh(range(len(names)), [values[n] for n in names], color="tab:blue")
        for bar, name in zip(bars, names):
            if name == baseline:
                bar.set_hatch("//")
                bar.set_facecolor("white")
                bar.set_edgecolor("tab:blue")
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize=7)
        ax.invert_yaxis()
        ax.set_xlabel(ylabel)
        fig.tight_layout()
        return _save(fig, path)
