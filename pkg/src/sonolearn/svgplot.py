"""Self-contained SVG chart writer (line and grouped-bar), no plot dependency.

Numbers are formatted with fixed precision so identical inputs produce
byte-identical files; callers rely on that for reproducible reports.
"""

from __future__ import annotations

import os
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH = 640
HEIGHT = 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 20, 40, 52

PALETTE = ("#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4", "#6b6b6b")


def _fmt(v):
    return f"{v:.2f}"


def _tick_label(v):
    return f"{v:.4g}"


def _y_scale(values, include_zero):
    lo = min(values)
    hi = max(values)
    if include_zero:
        lo = min(lo, 0.0)
        hi = max(hi, 0.0)
    if hi == lo:  # flat data still needs a nonzero span to map onto pixels
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - (0.0 if include_zero and lo == 0.0 else pad), hi + pad


def _axes(parts, x0, x1, y0, y1, ylo, yhi, title, xlabel, ylabel):
    parts.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    if title:
        parts.append(
            f'<text x="{WIDTH // 2}" y="22" text-anchor="middle" '
            f'font-size="15" font-family="sans-serif">{escape(title)}</text>'
        )
    parts.append(
        f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>'
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>'
    )
    for i in range(5):
        frac = i / 4
        v = ylo + frac * (yhi - ylo)
        y = y1 - frac * (y1 - y0)
        parts.append(
            f'<line x1="{x0 - 4}" y1="{_fmt(y)}" x2="{x0}" y2="{_fmt(y)}" stroke="black"/>'
            f'<text x="{x0 - 8}" y="{_fmt(y + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_tick_label(v)}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 10}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{escape(xlabel)}</text>'
        )
    if ylabel:
        cy = (y0 + y1) // 2
        parts.append(
            f'<text x="16" y="{cy}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 16 {cy})">{escape(ylabel)}</text>'
        )


def _legend(parts, labels, x1):
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        y = MARGIN_T + 6 + 16 * i
        parts.append(
            f'<rect x="{x1 - 130}" y="{y}" width="10" height="10" fill="{color}"/>'
            f'<text x="{x1 - 114}" y="{y + 9}" font-size="11" '
            f'font-family="sans-serif">{escape(label)}</text>'
        )


def _write(path, parts):
    path = Path(path)
    body = "\n".join(parts)
    doc = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n'
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(doc, encoding="utf-8")
    os.replace(tmp, path)


def line_chart(path, series, title="", xlabel="", ylabel=""):
    """series: list of (label, xs, ys) with equal-length xs/ys per entry."""
    if not series:
        raise ValueError("line_chart needs at least one series")
    all_x = [float(x) for _, xs, _ in series for x in xs]
    all_y = [float(y) for _, _, ys in series for y in ys]
    if not all_x:
        raise ValueError("line_chart series are empty")
    xlo, xhi = min(all_x), max(all_x)
    if xhi == xlo:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    ylo, yhi = _y_scale(all_y, include_zero=False)
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = MARGIN_T, HEIGHT - MARGIN_B

    def px(v):
        return x0 + (v - xlo) / (xhi - xlo) * (x1 - x0)

    def py(v):
        return y1 - (v - ylo) / (yhi - ylo) * (y1 - y0)

    parts = []
    _axes(parts, x0, x1, y0, y1, ylo, yhi, title, xlabel, ylabel)
    for x in sorted(set(all_x)):
        parts.append(
            f'<line x1="{_fmt(px(x))}" y1="{y1}" x2="{_fmt(px(x))}" y2="{y1 + 4}" stroke="black"/>'
            f'<text x="{_fmt(px(x))}" y="{y1 + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{_tick_label(x)}</text>'
        )
    for i, (label, xs, ys) in enumerate(series):
        if len(xs) != len(ys):
            raise ValueError(f"series {label!r} has mismatched lengths")
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(float(x)))},{_fmt(py(float(y)))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(
                f'<circle cx="{_fmt(px(float(x)))}" cy="{_fmt(py(float(y)))}" r="3" fill="{color}"/>'
            )
    _legend(parts, [label for label, _, _ in series], x1)
    _write(path, parts)


def bar_chart(path, categories, series, title="", ylabel=""):
    """Grouped bars: series = list of (label, values) aligned with categories."""
    if not categories or not series:
        raise ValueError("bar_chart needs categories and at least one series")
    for label, values in series:
        if len(values) != len(categories):
            raise ValueError(f"series {label!r} has {len(values)} values for "
                             f"{len(categories)} categories")
    all_y = [float(v) for _, values in series for v in values]
    ylo, yhi = _y_scale(all_y, include_zero=True)
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = MARGIN_T, HEIGHT - MARGIN_B

    def py(v):
        return y1 - (v - ylo) / (yhi - ylo) * (y1 - y0)

    parts = []
    _axes(parts, x0, x1, y0, y1, ylo, yhi, title, "", ylabel)
    n_groups = len(categories)
    n_series = len(series)
    group_w = (x1 - x0) / n_groups
    bar_w = 0.8 * group_w / n_series
    base = py(max(ylo, 0.0))
    for g, cat in enumerate(categories):
        gx = x0 + g * group_w
        parts.append(
            f'<text x="{_fmt(gx + group_w / 2)}" y="{y1 + 16}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{escape(str(cat))}</text>'
        )
        for s, (label, values) in enumerate(series):
            v = float(values[g])
            top = py(v)
            yy, hh = (top, base - top) if v >= 0 else (base, top - base)
            parts.append(
                f'<rect x="{_fmt(gx + 0.1 * group_w + s * bar_w)}" y="{_fmt(yy)}" '
                f'width="{_fmt(bar_w)}" height="{_fmt(max(hh, 0.0))}" '
                f'fill="{PALETTE[s % len(PALETTE)]}"/>'
            )
    _legend(parts, [label for label, _ in series], x1)
    _write(path, parts)


__all__ = ["line_chart", "bar_chart"]
