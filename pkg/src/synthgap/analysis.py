"""Curve fitting, accuracy gaps and report emission (CSV tables, SVG charts).

CSV numbers are written with 6 significant digits (``format(x, ".6g")``);
parsing and re-emitting a file reproduces it byte for byte. SVG charts are
written by hand so identical input yields identical bytes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import DegenerateDesignError, StorageError, ValidationError
from .results import SWEEP_HEADER, SweepResult, SweepRow
from .trainer import SummaryStats

TABLE_HEADER = [
    "experiment",
    "top1_mean",
    "top1_std",
    "top5_mean",
    "top5_std",
    "train_loss_mean",
    "train_loss_std",
    "run_dir",
]
PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


@dataclass
class CurveFit:
    """``y = a * ln(x) + b``."""

    a: float
    b: float
    rms_residual: float
    n_points: int

    def __call__(self, x):
        return self.a * np.log(x) + self.b

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "rms": self.rms_residual, "n": self.n_points}


def fit_log_curve(points) -> CurveFit:
    """Ordinary least squares of ``y`` on ``ln(x)`` via the normal equations."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ValidationError(f"need at least 2 points, got {len(pts)}")
    if any(x <= 0 for x, _ in pts):
        raise ValidationError("x values must be > 0")
    lx = np.array([math.log(x) for x, _ in pts])
    y = np.array([y for _, y in pts])
    lx_mean, y_mean = lx.mean(), y.mean()
    sxx = float(((lx - lx_mean) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateDesignError("all x values are equal; the slope is undetermined")
    a = float(((lx - lx_mean) * (y - y_mean)).sum()) / sxx
    b = float(y_mean - a * lx_mean)
    residual = y - (a * lx + b)
    return CurveFit(a, b, float(math.sqrt((residual**2).mean())), len(pts))


def compute_gap(real: SummaryStats, synth: SummaryStats) -> float:
    """Signed top-1 gap in percentage points (real minus synthetic)."""
    return (real.top1_mean - synth.top1_mean) * 100.0


# ---------------------------------------------------------------------------
# tables


@dataclass
class ReportRow:
    experiment: str
    stats: SummaryStats
    run_dir: str


@dataclass
class ReportTable:
    title: str
    rows: list[ReportRow] = field(default_factory=list)


def fmt_num(x: float) -> str:
    return format(float(x), ".6g")


def _table_lines(table) -> list[list[str]]:
    if isinstance(table, SweepResult):
        rows = table.all_rows()
        if not rows:
            raise ValidationError("sweep has no rows")
        lines = [SWEEP_HEADER]
        for r in rows:
            s = r.stats
            nums = ["", "", "", ""] if s is None else [fmt_num(v) for v in (s.top1_mean, s.top1_std, s.top5_mean, s.top5_std)]
            lines.append([r.protocol, r.param, str(r.seed), *nums, r.status])
        return lines
    if isinstance(table, ReportTable):
        if not table.rows:
            raise ValidationError("report table has no rows")
        lines = [TABLE_HEADER]
        for r in table.rows:
            s = r.stats
            lines.append(
                [r.experiment]
                + [fmt_num(v) for v in (s.top1_mean, s.top1_std, s.top5_mean, s.top5_std, s.loss_mean, s.loss_std)]
                + [r.run_dir]
            )
        return lines
    raise ValidationError(f"cannot emit {type(table).__name__} as CSV")


def emit_csv(table, path):
    lines = _table_lines(table)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(lines)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_sweep_csv(path, sweep_id: str | None = None) -> SweepResult:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            records = list(csv.DictReader(fh))
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    result = SweepResult(sweep_id or path.parent.name)
    for rec in records:
        stats = None
        if rec["top1_mean"]:
            stats = SummaryStats(
                float(rec["top1_mean"]), float(rec["top1_std"]), float(rec["top5_mean"]), float(rec["top5_std"])
            )
        row = SweepRow(rec["protocol"], rec["param"], int(rec["seed"]), stats, status=rec["status"])
        (result.baselines if row.protocol.startswith("baseline-") else result.rows).append(row)
    return result


# ---------------------------------------------------------------------------
# SVG charts

WIDTH, HEIGHT = 680, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 190, 40, 60


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _f(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return format(v, ".4g")


def emit_plot_svg(
    series,
    path,
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_x: bool = False,
    fit: CurveFit | None = None,
    fit_label: str = "log fit",
    hlines=(),
):
    """Write a standalone SVG line chart.

    ``series`` is a list of ``(label, [(x, y), ...])``; each becomes one
    ``<polyline>``. ``hlines`` is a list of ``(label, y)`` drawn as dashed
    horizontal lines; ``fit`` is drawn as a dashed ``<path>`` over the x range.
    """
    series = [(str(label), [(float(x), float(y)) for x, y in pts]) for label, pts in series]
    if not series or any(not pts for _, pts in series):
        raise ValidationError("emit_plot_svg needs at least one non-empty series")
    xs = [x for _, pts in series for x, _ in pts]
    if log_x and min(xs) <= 0:
        raise ValidationError("log-scale x axis needs positive x values")
    tx = (lambda x: math.log10(x)) if log_x else (lambda x: x)

    ys = [y for _, pts in series for _, y in pts] + [y for _, y in hlines]
    fit_pts = []
    if fit is not None:
        lo, hi = min(xs), max(xs)
        for i in range(41):
            x = math.exp(math.log(lo) + (math.log(hi) - math.log(lo)) * i / 40) if log_x else lo + (hi - lo) * i / 40
            if x > 0:
                fit_pts.append((x, float(fit(x))))
        ys += [y for _, y in fit_pts]

    x0, x1 = tx(min(xs)), tx(max(xs))
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = min(ys), max(ys)
    pad = (y1 - y0) * 0.08 or max(abs(y0) * 0.05, 0.05)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (tx(x) - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (y1 - y) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_f(LEFT + pw / 2)}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')

    # axes and ticks
    out.append('<g stroke="black" stroke-width="1">')
    out.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}"/>')
    out.append("</g>")
    distinct = sorted(set(xs))
    xticks = distinct if len(distinct) <= 12 else _nice_ticks(min(xs), max(xs))
    for t in xticks:
        if log_x and t <= 0:
            continue
        x = px(t)
        out.append(f'<line x1="{_f(x)}" y1="{TOP + ph}" x2="{_f(x)}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_f(x)}" y="{TOP + ph + 18}" text-anchor="middle">{_label(t)}</text>')
    for t in _nice_ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{LEFT - 5}" y1="{_f(y)}" x2="{LEFT}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<line x1="{LEFT}" y1="{_f(y)}" x2="{LEFT + pw}" y2="{_f(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_f(y + 4)}" text-anchor="end">{_label(t)}</text>')
    if xlabel:
        out.append(f'<text x="{_f(LEFT + pw / 2)}" y="{HEIGHT - 18}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        cy = TOP + ph / 2
        out.append(f'<text x="18" y="{_f(cy)}" text-anchor="middle" transform="rotate(-90 18 {_f(cy)})">{escape(ylabel)}</text>')

    legend = []
    for i, (label, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="3" fill="{color}"/>')
        legend.append((label, color, ""))
    for j, (label, y) in enumerate(hlines):
        color = PALETTE[(len(series) + j) % len(PALETTE)]
        out.append(
            f'<line x1="{LEFT}" y1="{_f(py(y))}" x2="{LEFT + pw}" y2="{_f(py(y))}" '
            f'stroke="{color}" stroke-width="1.5" stroke-dasharray="6,4"/>'
        )
        legend.append((str(label), color, "6,4"))
    if fit_pts:
        d = " ".join(("M" if i == 0 else "L") + f"{_f(px(x))},{_f(py(y))}" for i, (x, y) in enumerate(fit_pts))
        out.append(f'<path d="{d}" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="2,3"/>')
        legend.append((fit_label, "black", "2,3"))

    lx = LEFT + pw + 15
    for i, (label, color, dash) in enumerate(legend):
        y = TOP + 10 + 20 * i
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 24}" y2="{y}" stroke="{color}" stroke-width="2"{dash_attr}/>')
        out.append(f'<text x="{lx + 30}" y="{y + 4}">{escape(label)}</text>')
    out.append("</svg>")

    try:
        Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
