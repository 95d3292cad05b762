"""CSV log parsing, downsampling and dependency-free SVG line plots."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .trainer import IterationLog


class LogFormatError(ValueError):
    pass


def read_log_csv(path) -> list[IterationLog]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != IterationLog.CSV_HEADER:
        raise LogFormatError(f"{path}: row 1: expected header {IterationLog.CSV_HEADER!r}")
    rows = []
    for i, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise LogFormatError(f"{path}: row {i}: expected 9 fields, got {len(parts)}")
        try:
            rows.append(IterationLog(int(parts[0]), *(float(p) for p in parts[1:])))
        except ValueError as exc:
            raise LogFormatError(f"{path}: row {i}: {exc}") from None
    if not rows:
        raise LogFormatError(f"{path}: log has no data rows")
    return rows


def downsample_indices(n: int, points: int) -> np.ndarray:
    if n <= points:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, points)).astype(int))


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6g}"


def downsampled_csv(rows: Sequence[IterationLog], points: int = 200) -> str:
    idx = downsample_indices(len(rows), points)
    out = ["iter,lambda_hat,lambda,loss_fsl,loss_tval"]
    for i in idx:
        r = rows[i]
        out.append(",".join([str(r.t), _fmt(r.lambda_hat), _fmt(r.lam),
                             _fmt(r.loss_fsl), _fmt(r.loss_tval)]))
    return "\n".join(out) + "\n"


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def svg_line_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
                  xlabel: str, ylabel: str, width: int = 640, height: int = 400) -> str:
    """Standalone SVG with one polyline per named series, axes, ticks and a legend."""
    left, right, top, bottom = 60, 20, 40, 50
    finite_x = [x for xs, _ in series.values() for x in xs if math.isfinite(x)]
    finite_y = [y for _, ys in series.values() for y in ys if math.isfinite(y)]
    x0, x1 = (min(finite_x), max(finite_x)) if finite_x else (0.0, 1.0)
    y0, y1 = (min(finite_y), max(finite_y)) if finite_y else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="13">{xlabel}</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{ylabel}</text>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" '
                     f'font-size="11">{xv:.4g}</text>')
        parts.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{yv:.4g}</text>')
    for j, (name, (xs, ys)) in enumerate(series.items()):
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                       if math.isfinite(x) and math.isfinite(y))
        color = _COLORS[j % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{pts}"><title>{name}</title></polyline>')
        ly = top + 14 + 16 * j
        parts.append(f'<line x1="{left + pw - 120}" y1="{ly}" x2="{left + pw - 100}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 95}" y="{ly + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
