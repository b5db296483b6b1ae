"""Dataset-level IoU accounting and run reports.

Intersections and unions are pooled over all evaluated images before any
ratio is taken, per foreground class; background never enters the score.
Accumulators merge so shards can be evaluated independently.  Reports are a
fixed-schema CSV plus a hand-written SVG line plot (deterministic bytes for
identical inputs, which rules out plotting libraries).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError


class ConfusionAccumulator:
    """Pooled per-foreground-class intersection and union counts."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ContractError("need at least one foreground class plus background")
        self.num_classes = num_classes
        self.inter = np.zeros(num_classes - 1, dtype=np.int64)
        self.union = np.zeros(num_classes - 1, dtype=np.int64)

    def add(self, pred_onehot: np.ndarray, true_onehot: np.ndarray):
        if pred_onehot.shape != true_onehot.shape:
            raise DimensionError("prediction and truth shapes differ")
        if pred_onehot.shape[-3] != self.num_classes:
            raise DimensionError(f"expected {self.num_classes} channels")
        p = pred_onehot.astype(bool)
        t = true_onehot.astype(bool)
        axes = tuple(i for i in range(p.ndim) if i != p.ndim - 3)
        self.inter += np.logical_and(p, t).sum(axis=axes)[: self.num_classes - 1]
        self.union += np.logical_or(p, t).sum(axis=axes)[: self.num_classes - 1]

    def merge(self, other: "ConfusionAccumulator"):
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge accumulators with different class counts")
        self.inter += other.inter
        self.union += other.union
        return self

    def iou_per_class(self) -> np.ndarray:
        """IoU per foreground class; classes never seen (union 0) are NaN."""
        out = np.full(self.num_classes - 1, np.nan)
        seen = self.union > 0
        out[seen] = self.inter[seen] / self.union[seen]
        return out

    def miou(self):
        """Mean IoU over classes with nonzero union; None when all are empty."""
        per = self.iou_per_class()
        seen = ~np.isnan(per)
        if not seen.any():
            return None
        return float(per[seen].mean())


def aggregate(values) -> tuple:
    """Mean and sample standard deviation (ddof 1; 0.0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ContractError("aggregate needs at least one value")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class ReportRow:
    """One evaluated run; seed and runtime are bookkeeping, not report schema."""

    regime: str
    tier: str
    budget: int
    split: int
    per_class: list
    miou: float
    seed: int = 0
    runtime: float = 0.0


def _row_header(n_fg: int):
    return ["regime", "tier", "budget", "split"] + [f"iou_c{i}" for i in range(n_fg)] + ["miou"]


def write_rows_csv(rows, path, n_fg: int = 3):
    """Append-style row table: (regime, tier, budget, split, iou_c*, miou)."""
    if rows:
        n_fg = len(rows[0].per_class)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_row_header(n_fg))
        for r in rows:
            w.writerow([r.regime, r.tier, r.budget, r.split]
                       + [f"{v:.6f}" for v in r.per_class] + [f"{r.miou:.6f}"])


def append_row_csv(row: ReportRow, path):
    """Append one row, writing the header first if the file is new."""
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(_row_header(len(row.per_class)))
        w.writerow([row.regime, row.tier, row.budget, row.split]
                   + [f"{v:.6f}" for v in row.per_class] + [f"{row.miou:.6f}"])


def read_rows_csv(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return rows
        n_fg = len(header) - 5
        for line in reader:
            rows.append(ReportRow(
                regime=line[0], tier=line[1], budget=int(line[2]), split=int(line[3]),
                per_class=[float(x) for x in line[4 : 4 + n_fg]],
                miou=float(line[4 + n_fg])))
    return rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _svg_plot(series: dict, path):
    """Minimal line plot: mIoU vs budget, one polyline per (regime, tier)."""
    width, height = 640, 420
    ml, mr, mt, mb = 60, 160, 20, 45
    budgets = sorted({b for pts in series.values() for b, _ in pts})
    lo_x, hi_x = min(budgets), max(budgets)
    span_x = max(hi_x - lo_x, 1)

    def sx(b):
        return ml + (b - lo_x) / span_x * (width - ml - mr)

    def sy(v):
        return mt + (1.0 - v) * (height - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(f'<line x1="{ml}" y1="{y:.2f}" x2="{width - mr}" y2="{y:.2f}" '
                     'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.2f}" font-size="11" '
                     f'text-anchor="end" font-family="sans-serif">{frac:.2f}</text>')
    for b in budgets:
        x = sx(b)
        parts.append(f'<text x="{x:.2f}" y="{height - mb + 16}" font-size="11" '
                     f'text-anchor="middle" font-family="sans-serif">{b}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2:.2f}" y="{height - 8}" font-size="12" '
                 'text-anchor="middle" font-family="sans-serif">annotation budget</text>')
    parts.append(f'<text x="15" y="{(mt + height - mb) / 2:.2f}" font-size="12" '
                 'text-anchor="middle" font-family="sans-serif" '
                 f'transform="rotate(-90 15 {(mt + height - mb) / 2:.2f})">mIoU</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(b):.2f},{sy(v):.2f}" for b, v in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     'stroke-width="2"/>')
        for b, v in sorted(pts):
            parts.append(f'<circle cx="{sx(b):.2f}" cy="{sy(v):.2f}" r="3" fill="{color}"/>')
        ly = mt + 16 + i * 16
        parts.append(f'<line x1="{width - mr + 10}" y1="{ly - 4}" x2="{width - mr + 30}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - mr + 35}" y="{ly}" font-size="11" '
                     f'font-family="sans-serif">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


def emit_report(rows, out_dir):
    """Write report.csv, aggregate.csv and (with data) miou_vs_budget.svg.

    Aggregation groups rows by (regime, tier, budget) over splits.  An empty
    row list produces header-only CSVs and no plot.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.regime, r.tier, r.budget, r.split))
    write_rows_csv(rows, out / "report.csv")

    groups = {}
    for r in rows:
        groups.setdefault((r.regime, r.tier, r.budget), []).append(r.miou)
    with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["regime", "tier", "budget", "n_splits", "miou_mean", "miou_std"])
        for (regime, tier, budget), vals in sorted(groups.items()):
            mean, std = aggregate(vals)
            w.writerow([regime, tier, budget, len(vals), f"{mean:.6f}", f"{std:.6f}"])

    if not rows:
        return
    series = {}
    for (regime, tier, budget), vals in groups.items():
        series.setdefault(f"{regime}/{tier}", []).append((budget, aggregate(vals)[0]))
    _svg_plot(series, out / "miou_vs_budget.svg")
