"""Raster companions of the SVG report charts, rendered with matplotlib."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import StorageError, ValidationError  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.color": "#dddddd",
    "svg.hashsalt": "synthgap",
}


def render_png(series, path, *, title="", xlabel="", ylabel="", log_x=False, fit=None, fit_label="log fit", hlines=()):
    """Same arguments as ``analysis.emit_plot_svg``; writes a PNG."""
    if not series or any(len(pts) == 0 for _, pts in series):
        raise ValidationError("render_png needs at least one non-empty series")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for label, pts in series:
            x, y = zip(*pts)
            ax.plot(x, y, marker="o", ms=3, label=label)
        for label, y in hlines:
            ax.axhline(y, ls="--", lw=1, label=label, color="0.4" if "synth" in label else "0.1")
        if fit is not None:
            xs = [x for _, pts in series for x, _ in pts]
            grid = np.geomspace(min(xs), max(xs), 50)
            ax.plot(grid, fit(grid), ls=":", color="k", label=fit_label)
        if log_x:
            ax.set_xscale("log", base=2)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        try:
            fig.savefig(path, dpi=120, metadata={"Software": None})
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        finally:
            plt.close(fig)
