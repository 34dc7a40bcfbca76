"""Render seed-averaged metric curves to PNG files next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGURE_METRICS = {
    "grad_norm_avg_sq": r"$\|\nabla f(\bar{x}^k)\|^2$",
    "consensus_sq": r"$\|x^k - \bar{x}^k\|^2$",
    "subopt_avg": r"$f(\bar{x}^k) - f^\star$",
}

_STYLE = {
    "figure.figsize": (5.2, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.3,
}


def render_suite_figures(aggregates: dict[str, dict], out_dir: str | Path,
                         title: str) -> list[Path]:
    """One log-scale PNG per available metric, all run labels overlaid."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(_STYLE):
        for metric, ylabel in FIGURE_METRICS.items():
            curves = {label: agg for label, agg in aggregates.items()
                      if metric in agg and not _all_nan(agg[metric])}
            if not curves:
                continue
            fig, ax = plt.subplots()
            for label, agg in curves.items():
                ax.semilogy(agg["k"], agg[metric], label=label)
            ax.set_xlabel("iteration")
            ax.set_ylabel(ylabel)
            ax.set_title(title)
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = out / f"{metric}.png"
            fig.savefig(path, dpi=150)
            plt.close(fig)
            written.append(path)
    return written


def _all_nan(values) -> bool:
    return bool(np.all(np.isnan(values)))
