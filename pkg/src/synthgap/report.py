"""Render every completed sweep in a workspace into ``<workspace>/reports``.

Outputs per sweep kind:

* ``baseline.csv`` and the real-minus-synthetic gap
* ``transfer-<direction>.{csv,svg,png}``: top-1 against N with both baselines
* ``reduction.{csv,svg,png}`` (linear x) and ``reduction_log.{svg,png}``
  (log x): top-1 against the reduction factor, with the log fit of the
  frozen-prefix arm
* ``ablation-<kind>.csv``
* ``summary.json``: gap and fit coefficients
"""

from __future__ import annotations

import json
from pathlib import Path

from .analysis import ReportRow, ReportTable, compute_gap, emit_csv, emit_plot_svg, fit_log_curve
from .errors import ValidationError
from .figures import render_png
from .results import SweepResult, sweep_from_dict


def load_sweeps(workspace) -> dict[str, SweepResult]:
    runs = Path(workspace) / "runs"
    sweeps = {}
    if runs.is_dir():
        for path in sorted(runs.glob("*/sweep.json")):
            sweeps[path.parent.name] = sweep_from_dict(json.loads(path.read_text(encoding="utf-8")))
    return sweeps


def _table(title: str, rows) -> ReportTable:
    table = ReportTable(title)
    for r in rows:
        if r.ok:
            label = r.protocol if r.param == "-" else f"{r.protocol}:{r.param}"
            table.rows.append(ReportRow(label, r.stats, r.run_dir))
    return table


def _baseline_lines(result: SweepResult):
    lines = []
    for which, label in (("real", "real only"), ("synth", "synthetic only")):
        try:
            row = result.baseline(which)
        except KeyError:
            continue
        if row.ok:
            lines.append((label, 100 * row.stats.top1_mean))
    return lines


def _both(series, path: Path, **kw):
    emit_plot_svg(series, path.with_suffix(".svg"), **kw)
    render_png(series, path.with_suffix(".png"), **kw)


def build_report(workspace) -> dict:
    """Write all report files; returns the summary that is also saved as JSON."""
    workspace = Path(workspace)
    sweeps = load_sweeps(workspace)
    if not sweeps:
        raise ValidationError(f"no completed sweeps under {workspace / 'runs'}")
    out = workspace / "reports"
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"sweeps": sorted(sweeps)}

    base = sweeps.get("baseline")
    if base is not None:
        emit_csv(_table("baselines", base.baselines), out / "baseline.csv")
        try:
            real, synth = base.baseline("real"), base.baseline("synth")
            if real.ok and synth.ok:
                summary["gap_pp"] = compute_gap(real.stats, synth.stats)
        except KeyError:
            pass

    for sweep_id, result in sweeps.items():
        if sweep_id.startswith("transfer-"):
            emit_csv(result, out / f"{sweep_id}.csv")
            pts = sorted((int(r.param), 100 * r.stats.top1_mean) for r in result.rows if r.ok)
            if pts:
                _both(
                    [(sweep_id.removeprefix("transfer-"), pts)],
                    out / sweep_id,
                    title=f"Layer transfer ({sweep_id.removeprefix('transfer-')})",
                    xlabel="transferred units N",
                    ylabel="top-1 accuracy on real val (%)",
                    hlines=_baseline_lines(result),
                )
        elif sweep_id == "reduce":
            emit_csv(result, out / "reduction.csv")
            series, fits = [], {}
            for arm in sorted({r.protocol for r in result.rows}):
                pts = sorted((1.0 / float(r.param), 100 * r.stats.top1_mean) for r in result.rows if r.protocol == arm and r.ok)
                if not pts:
                    continue
                series.append((arm.removeprefix("reduce-"), pts))
                if len(pts) >= 2 and len({x for x, _ in pts}) >= 2:
                    fits[arm.removeprefix("reduce-")] = fit_log_curve(pts)
            if series:
                overlay = fits.get("synthetic-frozen-prefix") or next(iter(fits.values()), None)
                common = dict(
                    xlabel="reduction factor (1 / fraction of real train data)",
                    ylabel="top-1 accuracy on real val (%)",
                    fit=overlay,
                    hlines=_baseline_lines(result),
                )
                _both(series, out / "reduction", title="Data reduction (linear scale)", **common)
                _both(series, out / "reduction_log", title="Data reduction (logarithmic scale)", log_x=True, **common)
            summary["reduction_fit"] = {arm: fit.to_dict() for arm, fit in sorted(fits.items())}
        elif sweep_id.startswith("ablate-"):
            kind = sweep_id.removeprefix("ablate-")
            emit_csv(_table(kind, result.baselines + result.rows), out / f"ablation-{kind}.csv")

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
