"""Hand-built SVG density plots.

The plot overlays the sample and population propensity-score densities on
[0, 1] and shades the region under both curves (pointwise minimum). Output
is plain text with coordinates rounded to two decimals so files diff cleanly.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 20, "top": 40, "bottom": 50}
SAMPLE_COLOR = "#1f77b4"
POPULATION_COLOR = "#d62728"
SHARED_COLOR = "#9e9e9e"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _points(xs, ys) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))


def _nice_ticks(top: float, count: int = 5) -> list[float]:
    raw = top / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    return [i * step for i in range(int(np.floor(top / step + 1e-9)) + 1)]


def density_svg(grid, f_sample, f_population, title: str = "", header_lines=(),
                b_index: float | None = None) -> str:
    """Render two densities on a shared grid as an SVG document.

    Parameters
    ----------
    grid : array_like
        Increasing evaluation points in [0, 1].
    f_sample, f_population : array_like
        Density values on ``grid``.
    header_lines : sequence of str
        Written verbatim into a ``<metadata>`` element (tool version,
        invocation, seed).
    b_index : float, optional
        Printed in the subtitle when given.
    """
    grid = np.asarray(grid, dtype=float)
    fs = np.asarray(f_sample, dtype=float)
    fp = np.asarray(f_population, dtype=float)
    shared = np.minimum(fs, fp)
    ymax = float(max(fs.max(initial=0.0), fp.max(initial=0.0)))
    ymax = ymax * 1.05 if ymax > 0 else 1.0

    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def sx(v):
        return x0 + (x1 - x0) * v

    def sy(v):
        return y0 - (y0 - y1) * v / ymax

    px = sx(grid)
    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">')
    if header_lines:
        # metadata rather than a comment: comments cannot hold "--"
        body = "\n".join(escape(line) for line in header_lines)
        out.append(f"<metadata>\n{body}\n</metadata>")
    out.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')

    area = np.r_[px[0], px, px[-1]], np.r_[sy(0.0), sy(shared), sy(0.0)]
    out.append(f'<polygon class="intersection" points="{_points(*area)}" '
               f'fill="{SHARED_COLOR}" fill-opacity="0.45" stroke="none"/>')
    out.append(f'<polyline class="density sample" points="{_points(px, sy(fs))}" '
               f'fill="none" stroke="{SAMPLE_COLOR}" stroke-width="2"/>')
    out.append(f'<polyline class="density population" points="{_points(px, sy(fp))}" '
               f'fill="none" stroke="{POPULATION_COLOR}" stroke-width="2" stroke-dasharray="6,3"/>')

    # axes
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in np.linspace(0, 1, 6):
        x = _fmt(sx(t))
        out.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{y0 + 18}" text-anchor="middle">{t:.1f}</text>')
    for t in _nice_ticks(ymax):
        y = _fmt(sy(t))
        out.append(f'<line x1="{x0 - 5}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">{t:g}</text>')
    out.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{HEIGHT - 12}" text-anchor="middle">'
               'propensity score</text>')
    out.append(f'<text x="15" y="{_fmt((y0 + y1) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 15 {_fmt((y0 + y1) / 2)})">density</text>')

    heading = escape(title)
    if b_index is not None and np.isfinite(b_index):
        heading += f" (B-index {b_index:.3f})"
    out.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="22" text-anchor="middle" font-size="14">{heading}</text>')

    # legend
    lx, ly = x1 - 150, y1 + 10
    for i, (label, color, dash) in enumerate((("sample", SAMPLE_COLOR, ""),
                                              ("population", POPULATION_COLOR, ' stroke-dasharray="6,3"'))):
        y = ly + 16 * i
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 24}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{lx + 30}" y="{y}" dominant-baseline="middle">{label}</text>')
    y = ly + 32
    out.append(f'<rect x="{lx}" y="{y - 5}" width="24" height="10" fill="{SHARED_COLOR}" fill-opacity="0.45"/>')
    out.append(f'<text x="{lx + 30}" y="{y}" dominant-baseline="middle">shared</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
