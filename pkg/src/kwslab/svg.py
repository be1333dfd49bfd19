"""Dependency-free SVG line plots for DET curves and trade-off tables."""

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 560, 420
MARGIN = dict(left=70, right=20, top=40, bottom=55)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


class _Axis:
    def __init__(self, lo, hi, log, pixel_lo, pixel_hi):
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.log = lo, hi, log
        self.pixel_lo, self.pixel_hi = pixel_lo, pixel_hi

    def __call__(self, v):
        if self.log:
            v = math.log10(v)
        return self.pixel_lo + (v - self.lo) / (self.hi - self.lo) * (self.pixel_hi - self.pixel_lo)

    def ticks(self):
        if self.log:
            return [10.0**k for k in range(math.ceil(self.lo), math.floor(self.hi) + 1)]
        step = 10 ** math.floor(math.log10((self.hi - self.lo) / 4))
        for mult in (1, 2, 5, 10):
            if (self.hi - self.lo) / (step * mult) <= 6:
                step *= mult
                break
        first = math.ceil(self.lo / step) * step
        n = int(math.floor((self.hi - first) / step + 1e-9)) + 1
        return [first + i * step for i in range(n)]


def _fmt_tick(v, log):
    if log:
        return f"{v:g}"
    return f"{v:.6g}"


def line_plot(series, title, xlabel, ylabel, logx=False, logy=False, markers=False):
    """Render ``series`` as an SVG document string.

    Args:
        series: list of ``(label, xs, ys)``. On log axes, non-positive values
            must be clipped by the caller.
        title, xlabel, ylabel: text labels.
        logx, logy: use base-10 log axes.
        markers: draw a circle at each point.

    Returns:
        The SVG document as a string.
    """
    xs = [x for _, sx, _ in series for x in sx]
    ys = [y for _, _, sy in series for y in sy]
    if not xs:
        raise ValueError("nothing to plot")
    left, right = MARGIN["left"], WIDTH - MARGIN["right"]
    top, bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]
    ax = _Axis(min(xs), max(xs), logx, left, right)
    ay = _Axis(min(ys), max(ys), logy, bottom, top)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    for t in ax.ticks():
        px = ax(t)
        out.append(f'<line x1="{px:.2f}" y1="{top}" x2="{px:.2f}" y2="{bottom}" stroke="#ddd"/>')
        out.append(f'<text x="{px:.2f}" y="{bottom + 16}" text-anchor="middle">{_fmt_tick(t, logx)}</text>')
    for t in ay.ticks():
        py = ay(t)
        out.append(f'<line x1="{left}" y1="{py:.2f}" x2="{right}" y2="{py:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{py + 4:.2f}" text-anchor="end">{_fmt_tick(t, logy)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="black"/>')
    out.append(f'<text x="{(left + right) / 2:.1f}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(top + bottom) / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, (label, sx, sy) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{ax(x):.2f},{ay(y):.2f}" for x, y in zip(sx, sy))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        if markers:
            out.extend(f'<circle cx="{ax(x):.2f}" cy="{ay(y):.2f}" r="3" fill="{color}"/>' for x, y in zip(sx, sy))
        ly = top + 16 + 16 * k
        out.append(f'<line x1="{right - 120}" y1="{ly - 4}" x2="{right - 100}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right - 95}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def det_plot(curves, title="DET curve"):
    """DET curves on log-log axes; ``curves`` maps label to a DetCurve.

    Zero rates are drawn at half a count (``0.5 / n``) so they stay on the
    log axes.
    """
    series = []
    for label, c in curves.items():
        fa = [max(v, 0.5) / c.n_neg for v in c.false_accepts]
        fr = [max(v, 0.5) / c.n_pos for v in c.false_rejects]
        series.append((label, fa, fr))
    return line_plot(series, title, "false accept rate", "false reject rate", logx=True, logy=True)


def tradeoff_plot(rows, title="Latency reduction vs false accepts"):
    """Scatter-line of latency reduction (ms) against relative FA at fixed FRR."""
    rows = sorted(rows, key=lambda r: r["latency_reduction_ms"])
    xs = [r["latency_reduction_ms"] for r in rows]
    ys = [r["relative_fa"] for r in rows]
    return line_plot([("models", xs, ys)], title, "latency reduction (ms)", "relative false accepts", markers=True)
