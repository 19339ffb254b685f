"""Tiny SVG writer for line charts and 2-D scatter plots.

Output is plain text with fixed number formatting, so identical inputs give
identical files. Metadata (config hash, seed) goes into a ``<desc>`` element.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
W, H = 640, 420
PAD_L, PAD_R, PAD_T, PAD_B = 64, 150, 36, 48


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _bounds(arrays, pad_frac=0.05):
    vals = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad_frac * span, hi + pad_frac * span


class _Canvas:
    def __init__(self, title: str, meta: dict, xr, yr, xlabel: str, ylabel: str):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f"<desc>{escape(' '.join(f'{k}={v}' for k, v in sorted(meta.items())))}</desc>",
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2:.0f}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">'
            f"{escape(title)}</text>",
        ]
        x0, y0, x1, y1 = PAD_L, H - PAD_B, W - PAD_R, PAD_T
        self.parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
                          'fill="none" stroke="#444"/>')
        for i in range(5):
            fx = xr[0] + (xr[1] - xr[0]) * i / 4
            fy = yr[0] + (yr[1] - yr[0]) * i / 4
            px, py = self.px(fx), self.py(fy)
            self.parts.append(f'<text x="{_fmt(px)}" y="{y0 + 16}" text-anchor="middle" font-size="10" '
                              f'font-family="sans-serif">{fx:.3g}</text>')
            self.parts.append(f'<text x="{x0 - 6}" y="{_fmt(py + 3)}" text-anchor="end" font-size="10" '
                              f'font-family="sans-serif">{fy:.3g}</text>')
        self.parts.append(f'<text x="{(x0 + x1) / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="12" '
                          f'font-family="sans-serif">{escape(xlabel)}</text>')
        self.parts.append(f'<text x="14" y="{(y0 + y1) / 2:.0f}" text-anchor="middle" font-size="12" '
                          f'font-family="sans-serif" transform="rotate(-90 14 {(y0 + y1) / 2:.0f})">'
                          f"{escape(ylabel)}</text>")
        self.n_legend = 0

    def px(self, x):
        return PAD_L + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (W - PAD_L - PAD_R)

    def py(self, y):
        return H - PAD_B - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * (H - PAD_B - PAD_T)

    def legend(self, label: str, color: str):
        y = PAD_T + 8 + 18 * self.n_legend
        x = W - PAD_R + 12
        self.parts.append(f'<rect x="{x}" y="{y - 8}" width="12" height="10" fill="{color}"/>')
        self.parts.append(f'<text x="{x + 18}" y="{y + 1}" font-size="11" font-family="sans-serif">'
                          f"{escape(label)}</text>")
        self.n_legend += 1

    def text(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict, title: str, meta: dict, xlabel: str = "iteration",
               ylabel: str = "mean reward") -> str:
    """``series`` maps a label to ``(x, y)`` arrays; one polyline each."""
    xs = [np.asarray(x, dtype=float) for x, _ in series.values()]
    ys = [np.asarray(y, dtype=float) for _, y in series.values()]
    cv = _Canvas(title, meta, _bounds(xs, 0.0), _bounds(ys), xlabel, ylabel)
    for i, (label, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(cv.px(a))},{_fmt(cv.py(b))}" for a, b in zip(x, y) if np.isfinite(b))
        cv.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        cv.legend(label, color)
    return cv.text()


def scatter(groups: dict, title: str, meta: dict, radius: float = 1.6) -> str:
    """``groups`` maps a label to an ``(n, 2)`` point array."""
    pts = [np.asarray(p, dtype=float) for p in groups.values()]
    lim = _bounds([np.abs(p) for p in pts])[1]
    cv = _Canvas(title, meta, (-lim, lim), (-lim, lim), "x0", "x1")
    for i, (label, p) in enumerate(groups.items()):
        color = PALETTE[i % len(PALETTE)]
        for a, b in np.asarray(p, dtype=float):
            cv.parts.append(f'<circle cx="{_fmt(cv.px(a))}" cy="{_fmt(cv.py(b))}" r="{radius}" '
                            f'fill="{color}" fill-opacity="0.5"/>')
        cv.legend(label, color)
    return cv.text()


def moving_average(y, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    y = np.asarray(y, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(1, len(y) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
