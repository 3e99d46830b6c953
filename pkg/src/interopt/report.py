"""Campaign report files and static SVG figures."""

from __future__ import annotations

import csv
import json
import math
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .optimizer import AblationRow, CampaignReport, WellResult, reduction_histogram

REPORT_FORMAT = "interopt-campaign/1"


def _num(v):
    """JSON-safe float: non-finite values become null."""
    v = float(v)
    return v if math.isfinite(v) else None


def _nums(a) -> list:
    return [_num(v) for v in np.asarray(a, dtype=float).ravel()]


def well_to_dict(w: WellResult) -> dict:
    p, t = w.plan, w.trace
    return {
        "id": p.record_id,
        "outcome": p.outcome,
        "features": list(p.feature_names),
        "before": _nums(p.before),
        "after": _nums(p.after),
        "after_rounded": _nums(p.rounded(p.after)),
        "in_process": _nums(p.in_process),
        "in_process_rounded": _nums(p.rounded(p.in_process)),
        "predicted_before": _num(p.predicted_before),
        "predicted_after": _num(p.predicted_after),
        "predicted_in_process": _num(p.predicted_in_process),
        "reduction": _num(p.reduction),
        "in_process_reduction": _num(p.in_process_reduction),
        "inputs_before": _nums(p.full_before),
        "inputs_after": _nums(p.full_after),
        "shap": None if w.attribution is None else _nums(w.attribution.values),
        "error": w.error,
        "trace": {
            "initial_objective": _num(t.initial_objective),
            "final_objective": _num(t.final_objective),
            "converged": t.converged,
            "failure": t.failure,
            "columns": ["iteration", "block", "predicted_target", "objective", "step", "accepted"],
            "iterations": [[r.iteration, r.block, _num(r.predicted_target), _num(r.objective), _num(r.step),
                            r.accepted] for r in t.iterations],
            "blocks": [{"block": b.block, "entry_objective": _num(b.entry_objective),
                        "end_objective": _num(b.end_objective), "committed": b.committed,
                        "best_so_far": _num(b.best_so_far)} for b in t.blocks],
        },
    }


def campaign_to_dict(rep: CampaignReport, input_names: Sequence[str] = ()) -> dict:
    return {
        "format": REPORT_FORMAT,
        "direction": rep.direction,
        "config": rep.config.to_dict(),
        "input_names": list(input_names),
        "summary": {
            "n_wells": len(rep.wells),
            "mean_reduction": _num(rep.mean_reduction),
            "outcomes": rep.outcome_counts(),
            "histogram": [{"bucket": b, "count": c, "mean_reduction_pct": _num(m)} for b, c, m in rep.histogram()],
        },
        "wells": [well_to_dict(w) for w in rep.wells],
    }


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_campaign_json(rep: CampaignReport, path, input_names: Sequence[str] = ()):
    dump_json(campaign_to_dict(rep, input_names), path)


def load_campaign_json(path) -> dict:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(d, dict) or d.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not a campaign report")
    return d


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_summary_csv(report: dict, path):
    """One row per well: id, predicted target before/after, reduction %, outcome."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["id", "predicted_before", "predicted_after", "reduction_pct", "outcome"])
        for well in report["wells"]:
            r = well["reduction"]
            w.writerow([well["id"], _fmt(well["predicted_before"]), _fmt(well["predicted_after"]),
                        _fmt(None if r is None else 100.0 * r), well["outcome"]])


def distribution_rows(report: dict):
    pct = [100.0 * (w["reduction"] if w["reduction"] is not None else 0.0) for w in report["wells"]]
    return reduction_histogram(pct)


def write_distribution_csv(report: dict, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["bucket", "count", "mean_reduction_pct"])
        for label, count, mean in distribution_rows(report):
            w.writerow([label, count, _fmt(mean)])


def write_ablation_csv(rows: Sequence[AblationRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["block_optimization", "adaptive_step", "not_converged", "no_improvement", "failed",
                    "mean_reduction_pct"])
        for r in rows:
            w.writerow([int(r.block_optimization), int(r.adaptive_step), r.not_converged, r.no_improvement,
                        r.failed, _fmt(100.0 * r.mean_reduction)])


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_W, _H, _PAD = 640, 400, 60


def _svg(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{_W}" height="{_H}" fill="white"/>',
                      f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
                      *body, "</svg>"]) + "\n"


def bar_chart_svg(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str = "") -> str:
    vals = [0.0 if v is None or not math.isfinite(v) else float(v) for v in values]
    top = max([abs(v) for v in vals] + [1e-300])
    n = max(len(vals), 1)
    plot_w, plot_h = _W - 2 * _PAD, _H - 2 * _PAD
    bw = plot_w / n
    body = [f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
            f'<text x="15" y="{_H / 2:.1f}" transform="rotate(-90 15 {_H / 2:.1f})" '
            f'text-anchor="middle">{escape(ylabel)}</text>']
    for i, (lab, v) in enumerate(zip(labels, vals)):
        h = plot_h * abs(v) / top
        x = _PAD + i * bw
        body.append(f'<rect x="{x + 0.1 * bw:.2f}" y="{_H - _PAD - h:.2f}" width="{0.8 * bw:.2f}" '
                    f'height="{h:.2f}" fill="#4477aa"/>')
        body.append(f'<text x="{x + bw / 2:.2f}" y="{_H - _PAD - h - 4:.2f}" text-anchor="middle">{v:.4g}</text>')
        body.append(f'<text x="{x + bw / 2:.2f}" y="{_H - _PAD + 15:.2f}" text-anchor="middle">{escape(lab)}</text>')
    return _svg(body, title)


def line_chart_svg(series: Sequence[Sequence[float]], title: str, xlabel: str = "", ylabel: str = "") -> str:
    finite = [v for s in series for v in s if v is not None and math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    longest = max([len(s) for s in series] + [2])
    plot_w, plot_h = _W - 2 * _PAD, _H - 2 * _PAD
    body = [f'<rect x="{_PAD}" y="{_PAD}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>',
            f'<text x="{_W / 2:.1f}" y="{_H - 15}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="15" y="{_H / 2:.1f}" transform="rotate(-90 15 {_H / 2:.1f})" '
            f'text-anchor="middle">{escape(ylabel)}</text>',
            f'<text x="{_PAD - 4}" y="{_PAD + 4}" text-anchor="end">{hi:.4g}</text>',
            f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end">{lo:.4g}</text>']
    for s in series:
        pts = [f"{_PAD + plot_w * i / (longest - 1):.2f},{_H - _PAD - plot_h * (v - lo) / (hi - lo):.2f}"
               for i, v in enumerate(s) if v is not None and math.isfinite(v)]
        if pts:
            body.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="#4477aa" '
                        f'stroke-opacity="0.5"/>')
    return _svg(body, title)


def write_text(text: str, path):
    Path(path).write_text(text, encoding="utf-8")


def histogram_svg(report: dict) -> str:
    rows = distribution_rows(report)
    return bar_chart_svg([r[0] for r in rows], [r[1] for r in rows], "Reduction rate distribution", "wells")


def curves_svg(report: dict) -> str:
    """Predicted target per iteration relative to each well's prior, in percent."""
    series = []
    for well in report["wells"]:
        y0 = well["predicted_before"]
        if not y0:
            continue
        sign = 1.0 if report["direction"] == "minimize" else -1.0
        pts = [0.0] + [None if row[2] is None else sign * 100.0 * (y0 - row[2]) / abs(y0)
                       for row in well["trace"]["iterations"]]
        series.append(pts)
    return line_chart_svg(series, "Per-well reduction curves", "iteration", "reduction %")


def importance_svg(names: Sequence[str], values: Sequence[float]) -> str:
    return bar_chart_svg(list(names), list(values), "Global importance (mean |shap|)", "mean |shap|")
