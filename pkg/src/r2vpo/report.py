"""Metrics CSV and dependency-free SVG output."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

from .trainer import MetricsRow, RunMetrics

METRICS_HEADER = [
    "iteration", "cumulative_rollouts", "mean_reward", "ratio_variance", "lambda",
    "clipped_fraction", "clamp_events", "eureka_prob", "wall_ms",
]
NOT_REACHED = "not reached"


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    return f"{float(x):.9g}"


def metrics_rows(metrics: RunMetrics) -> list[list[str]]:
    return [
        [fmt(r.iteration), fmt(r.cumulative_rollouts), fmt(r.mean_reward), fmt(r.ratio_variance), fmt(r.lam),
         fmt(r.clipped_fraction), fmt(r.clamp_events), fmt(r.eureka_prob), fmt(r.wall_ms)]
        for r in metrics.rows
    ]


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def write_metrics_csv(path: str | Path, metrics: RunMetrics) -> Path:
    return write_csv(path, METRICS_HEADER, metrics_rows(metrics))


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    header, rows = read_csv(path)
    if header != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header {header}")
    out = []
    for r in rows:
        if len(r) != len(METRICS_HEADER):
            raise ValueError(f"row has {len(r)} columns, expected {len(METRICS_HEADER)}")
        out.append(MetricsRow(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]),
                              int(r[6]), float(r[7]), float(r[8])))
    return out


# -- SVG ----------------------------------------------------------------------

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
W, H, PAD = 640, 420, 56


class _Frame:
    def __init__(self, xs, ys, logx=False):
        xs = [x for x in xs if math.isfinite(x) and (x > 0 or not logx)]
        ys = [y for y in ys if math.isfinite(y)]
        self.logx = logx
        tx = [math.log10(x) for x in xs] if logx else xs
        self.x0, self.x1 = (min(tx), max(tx)) if tx else (0.0, 1.0)
        self.y0, self.y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5

    def px(self, x: float) -> float:
        if self.logx:
            x = math.log10(x)
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y: float) -> float:
        return H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)


def _axes(fr: _Frame, title: str, xlabel: str, ylabel: str) -> list[str]:
    lo_x = f"1e{fr.x0:.2g}" if fr.logx else f"{fr.x0:.4g}"
    hi_x = f"1e{fr.x1:.2g}" if fr.logx else f"{fr.x1:.4g}"
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{ylabel}</text>',
        f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">{lo_x}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 16}" text-anchor="end" font-size="10">{hi_x}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{fr.y0:.4g}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{fr.y1:.4g}</text>',
    ]


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = PAD + 14 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - PAD - 150}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - PAD - 135}" y="{y + 1}" font-size="11">{name}</text>')
    return out


def line_plot(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
              xlabel: str, ylabel: str, hlines: Sequence[float] = ()) -> Path:
    xs = [x for s in series.values() for x in s[0]]
    ys = [y for s in series.values() for y in s[1]] + list(hlines)
    fr = _Frame(xs, ys)
    parts = _axes(fr, title, xlabel, ylabel)
    for y in hlines:
        parts.append(f'<line x1="{PAD}" y1="{fr.py(y):.2f}" x2="{W - PAD}" y2="{fr.py(y):.2f}" '
                     f'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, (sx, sy)) in enumerate(series.items()):
        pts = " ".join(f"{fr.px(x):.2f},{fr.py(y):.2f}" for x, y in zip(sx, sy) if math.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5" points="{pts}"/>')
    parts += _legend(list(series))
    parts.append("</svg>")
    return _write(path, parts)


def scatter_plot(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
                 xlabel: str, ylabel: str, hlines: Sequence[float] = (), logx: bool = False) -> Path:
    xs = [x for s in series.values() for x in s[0]]
    ys = [y for s in series.values() for y in s[1]] + list(hlines)
    fr = _Frame(xs, ys, logx=logx)
    parts = _axes(fr, title, xlabel, ylabel)
    for y in hlines:
        parts.append(f'<line x1="{PAD}" y1="{fr.py(y):.2f}" x2="{W - PAD}" y2="{fr.py(y):.2f}" '
                     f'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, (sx, sy)) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        for x, y in zip(sx, sy):
            if math.isfinite(x) and math.isfinite(y) and (x > 0 or not logx):
                parts.append(f'<circle cx="{fr.px(x):.2f}" cy="{fr.py(y):.2f}" r="2" fill="{c}" fill-opacity="0.6"/>')
    parts += _legend(list(series))
    parts.append("</svg>")
    return _write(path, parts)


def _write(path, parts: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
    return path
