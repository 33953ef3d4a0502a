"""Self-contained SVG learning curves: log2 cost against cumulative episodes."""
from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=30, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def aggregate(records) -> dict:
    """Per method: (episodes, mean cost, stderr across seeds) on the shared episode grid.

    Rows flagged as failed are dropped. With one seed the stderr is the
    record's own evaluation stderr.
    """
    by_method = defaultdict(list)
    for rec in records:
        by_method[rec.method].append(rec)
    out = {}
    for method, recs in by_method.items():
        table = defaultdict(list)
        own_err = defaultdict(list)
        for rec in recs:
            for row in rec.rows:
                if row["failed"] or not math.isfinite(row["cost_mean"]):
                    continue
                table[row["episodes"]].append(row["cost_mean"])
                own_err[row["episodes"]].append(row["cost_stderr"])
        eps = np.array(sorted(table), dtype=float)
        mean = np.array([np.mean(table[e]) for e in sorted(table)])
        err = np.array([np.std(table[e], ddof=1) / math.sqrt(len(table[e])) if len(table[e]) > 1
                        else own_err[e][0] for e in sorted(table)])
        out[method] = (eps, mean, err)
    return out


def _log2(x) -> np.ndarray:
    return np.log2(np.maximum(np.asarray(x, dtype=float), np.finfo(float).tiny))


def emit_plot(records, output_path, title: str = "") -> Path:
    """Write an SVG with one mean line and standard-error band per method."""
    records = list(records)
    if not records:
        raise ValueError("no run records to plot")
    curves = aggregate(records)
    curves = {m: c for m, c in curves.items() if len(c[0])}
    if not curves:
        raise ValueError("records contain no finite evaluation rows")

    x_all = np.concatenate([c[0] for c in curves.values()])
    y_lo = np.concatenate([_log2(c[1] - c[2]) if np.all(c[1] - c[2] > 0) else _log2(c[1])
                           for c in curves.values()])
    y_hi = np.concatenate([_log2(c[1] + c[2]) for c in curves.values()])
    x0, x1 = float(x_all.min()), float(x_all.max())
    y0, y1 = math.floor(float(y_lo.min())), math.ceil(float(y_hi.max()))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1

    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    sx = lambda x: MARGIN["left"] + (np.asarray(x) - x0) / (x1 - x0) * pw
    sy = lambda y: MARGIN["top"] + (y1 - np.asarray(y)) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
             f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
             f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        parts.append(f'<text x="{MARGIN["left"]}" y="18" font-size="13">{escape(title)}</text>')
    # axes and ticks
    left, bottom = MARGIN["left"], MARGIN["top"] + ph
    parts.append(f'<line x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    step = max(1, int(math.ceil((y1 - y0) / 8)))
    for k in range(y0, y1 + 1, step):
        y = float(sy(k))
        parts.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">2^{k}</text>')
    for x in np.linspace(x0, x1, 6):
        px = float(sx(x))
        parts.append(f'<line x1="{px:.2f}" y1="{bottom}" x2="{px:.2f}" y2="{bottom + 4}" stroke="black"/>')
        parts.append(f'<text x="{px:.2f}" y="{bottom + 16}" text-anchor="middle">{x:g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">episodes</text>')
    parts.append(f'<text x="16" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">cumulative cost (log2)</text>')

    for i, (method, (eps, mean, err)) in enumerate(sorted(curves.items())):
        color = PALETTE[i % len(PALETTE)]
        ym = _log2(mean)
        lo = np.where(mean - err > 0, _log2(mean - err), ym)
        hi = _log2(mean + err)
        band = [f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(eps, hi)]
        band += [f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(eps[::-1], lo[::-1])]
        name = escape(method, {'"': "&quot;"})
        parts.append(f'<polygon class="band" data-method="{name}" points="{" ".join(band)}" '
                     f'fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(eps, ym))
        ys = " ".join(repr(float(y)) for y in ym)
        xs = " ".join(repr(float(x)) for x in eps)
        parts.append(f'<polyline class="mean" data-method="{name}" data-x="{xs}" data-log2-y="{ys}" '
                     f'points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = left + pw + 14
        parts.append(f'<g class="legend-entry" data-method="{name}">'
                     f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
                     f'<text x="{lx + 26}" y="{ly + 4}">{escape(method)}</text></g>')
    parts.append("</svg>")
    path = Path(output_path)
    path.write_text("\n".join(parts) + "\n")
    return path
