"""Minimal SVG line and box plots for evaluation reports."""

from __future__ import annotations

import math
from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


class _Panel:
    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def sx(self, x):
        a, b = self.xlim
        return self.x0 + (x - a) / (b - a or 1.0) * self.w

    def sy(self, y):
        a, b = self.ylim
        return self.y0 + self.h - (y - a) / (b - a or 1.0) * self.h

    def frame(self, title, xlabel, ylabel, xticks=True) -> list[str]:
        out = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" '
               f'fill="none" stroke="#333"/>',
               f'<text x="{self.x0 + self.w / 2}" y="{self.y0 - 8}" text-anchor="middle" '
               f'font-size="13">{escape(title)}</text>',
               f'<text x="{self.x0 + self.w / 2}" y="{self.y0 + self.h + 34}" text-anchor="middle" '
               f'font-size="11">{escape(xlabel)}</text>',
               f'<text transform="translate({self.x0 - 42},{self.y0 + self.h / 2}) rotate(-90)" '
               f'text-anchor="middle" font-size="11">{escape(ylabel)}</text>']
        for t in _ticks(*self.ylim):
            y = self.sy(t)
            out.append(f'<line x1="{self.x0 - 4}" y1="{_fmt(y)}" x2="{self.x0}" y2="{_fmt(y)}" stroke="#333"/>'
                       f'<text x="{self.x0 - 6}" y="{_fmt(y + 4)}" text-anchor="end" font-size="10">{t:g}</text>')
        if xticks:
            for t in _ticks(*self.xlim):
                x = self.sx(t)
                out.append(f'<line x1="{_fmt(x)}" y1="{self.y0 + self.h}" x2="{_fmt(x)}" '
                           f'y2="{self.y0 + self.h + 4}" stroke="#333"/><text x="{_fmt(x)}" '
                           f'y="{self.y0 + self.h + 16}" text-anchor="middle" font-size="10">{t:g}</text>')
        return out


def _limits(values, pad=0.05):
    v = np.concatenate([np.asarray(a, dtype=float).ravel() for a in values]) if values else np.array([])
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (0.0, 1.0)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    return (lo - pad * span, hi + pad * span)


def line_panel(panel_xy, size, series, title="", xlabel="", ylabel="") -> list[str]:
    """``series`` is a list of (label, x, y); NaN entries break the line."""
    xlim = _limits([s[1] for s in series], 0.0)
    ylim = _limits([s[2] for s in series])
    p = _Panel(*panel_xy, *size, xlim, ylim)
    out = p.frame(title, xlabel, ylabel)
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        segs, cur = [], []
        for x, y in zip(xs, ys):
            if y is None or not math.isfinite(y):
                if cur:
                    segs.append(cur)
                cur = []
                continue
            cur.append(f"{_fmt(p.sx(x))},{_fmt(p.sy(y))}")
        if cur:
            segs.append(cur)
        for seg in segs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(seg)}"/>')
        ly = p.y0 + 14 + 14 * k
        out.append(f'<line x1="{p.x0 + p.w - 90}" y1="{ly - 4}" x2="{p.x0 + p.w - 72}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{p.x0 + p.w - 68}" y="{ly}" '
                   f'font-size="10">{escape(label)}</text>')
    return out


def box_panel(panel_xy, size, groups, title="", ylabel="") -> list[str]:
    """``groups`` is a list of (label, values); whiskers at 1.5 IQR."""
    vals = [np.asarray([v for v in g if v is not None and math.isfinite(v)], dtype=float) for _, g in groups]
    ylim = _limits(vals)
    p = _Panel(*panel_xy, *size, (0.0, float(len(groups))), ylim)
    out = p.frame(title, "", ylabel, xticks=False)
    for k, ((label, _), v) in enumerate(zip(groups, vals)):
        cx = p.sx(k + 0.5)
        out.append(f'<text x="{_fmt(cx)}" y="{p.y0 + p.h + 16}" text-anchor="middle" '
                   f'font-size="10">{escape(label)}</text>')
        if v.size == 0:
            continue
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        iqr = q3 - q1
        lo = v[v >= q1 - 1.5 * iqr].min()
        hi = v[v <= q3 + 1.5 * iqr].max()
        color = PALETTE[k % len(PALETTE)]
        bw = min(40.0, p.w / len(groups) * 0.5)
        out.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(p.sy(lo))}" x2="{_fmt(cx)}" y2="{_fmt(p.sy(hi))}" '
                   f'stroke="{color}"/>')
        out.append(f'<rect x="{_fmt(cx - bw / 2)}" y="{_fmt(p.sy(q3))}" width="{_fmt(bw)}" '
                   f'height="{_fmt(max(p.sy(q1) - p.sy(q3), 0.5))}" fill="white" stroke="{color}"/>')
        out.append(f'<line x1="{_fmt(cx - bw / 2)}" y1="{_fmt(p.sy(med))}" x2="{_fmt(cx + bw / 2)}" '
                   f'y2="{_fmt(p.sy(med))}" stroke="{color}" stroke-width="2"/>')
        for o in v[(v < lo) | (v > hi)]:
            out.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(p.sy(o))}" r="1.5" fill="{color}"/>')
    return out


def figure(panels: list[list[str]], width: int, height: int) -> str:
    body = "\n".join(line for panel in panels for line in panel)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def report_figure(report: dict, rows) -> str:
    """Per-frame angle errors over time plus box plots of the estimated angles."""
    pf = report["per_frame"]
    t = [p["t"] for p in pf]

    def series(method, key):
        return [p[method][key] if p[method] is not None else math.nan for p in pf]

    w, h = 520, 220
    panels = [
        line_panel((70, 40), (w, h), [("EKF", t, series("ekf", "theta_err_deg")),
                                      ("baseline", t, series("base", "theta_err_deg"))],
                   "theta error", "time (s)", "deg"),
        line_panel((70, 340), (w, h), [("EKF", t, series("ekf", "phi_err_deg")),
                                       ("baseline", t, series("base", "phi_err_deg"))],
                   "phi error", "time (s)", "deg"),
    ]
    est = {"theta EKF": [], "theta base": [], "phi EKF": [], "phi base": []}
    for r in rows:
        for name, ax in (("EKF", r.ekf_axis), ("base", r.baseline_axis)):
            if ax is None:
                continue
            l = ax.l if ax.l[2] >= 0 else -ax.l
            est[f"theta {name}"].append(math.degrees(math.acos(min(1.0, l[2]))))
            est[f"phi {name}"].append(math.degrees(math.atan2(l[1], l[0])))
    panels.append(box_panel((680, 40), (300, h), [(k, est[k]) for k in ("theta EKF", "theta base")],
                            "estimated theta", "deg"))
    panels.append(box_panel((680, 340), (300, h), [(k, est[k]) for k in ("phi EKF", "phi base")],
                            "estimated phi", "deg"))
    return figure(panels, 1020, 620)
