"""Dependency-free SVG charts for training curves and halting-depth histograms."""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
MARGIN = 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _scale(lo: float, hi: float, a: float, b: float):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _frame(title: str, xlabel: str, ylabel: str, y_lo: float, y_hi: float) -> list:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end">{y_lo:.3g}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end">{y_hi:.3g}</text>',
    ]
    return parts


def line_chart(series: dict, title: str = "", xlabel: str = "step", ylabel: str = "") -> str:
    """Overlay one polyline per named series (lists of y values against their index)."""
    values = [v for ys in series.values() for v in ys]
    if not values:
        values = [0.0]
    y_lo, y_hi = min(values), max(values)
    n_max = max((len(ys) for ys in series.values()), default=1)
    sx = _scale(0, max(n_max - 1, 1), MARGIN, WIDTH - MARGIN)
    sy = _scale(y_lo, y_hi, HEIGHT - MARGIN, MARGIN)
    parts = _frame(title, xlabel, ylabel, y_lo, y_hi)
    for i, (name, ys) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{sx(j):.1f},{sy(y):.1f}" for j, y in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{points}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * i}" fill="{colour}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def bar_chart(heights, labels=None, title: str = "", xlabel: str = "layer", ylabel: str = "tokens") -> str:
    heights = [float(h) for h in heights]
    labels = labels or [str(i + 1) for i in range(len(heights))]
    top = max(heights, default=1.0) or 1.0
    sy = _scale(0.0, top, HEIGHT - MARGIN, MARGIN)
    slot = (WIDTH - 2 * MARGIN) / max(len(heights), 1)
    parts = _frame(title, xlabel, ylabel, 0.0, top)
    for i, (h, lab) in enumerate(zip(heights, labels)):
        x = MARGIN + i * slot + slot * 0.1
        y = sy(h)
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{slot * 0.8:.1f}" height="{HEIGHT - MARGIN - y:.1f}" fill="{PALETTE[0]}"/>')
        parts.append(f'<text x="{x + slot * 0.4:.1f}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{escape(lab)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
