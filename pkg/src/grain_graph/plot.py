"""Plain-text SVG figures for evaluation reports and loss traces."""

from xml.sax.saxutils import escape

import numpy as np

from .errors import ValidationError

WIDTH, HEIGHT, MARGIN = 480, 480, 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.2f}"


def _axis_range(values):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    """Maps data coordinates into the plotting box."""

    def __init__(self, xr, yr):
        self.xr, self.yr = xr, yr

    def x(self, v):
        return MARGIN + (v - self.xr[0]) / (self.xr[1] - self.xr[0]) * (WIDTH - 2 * MARGIN)

    def y(self, v):
        return HEIGHT - MARGIN - (v - self.yr[0]) / (self.yr[1] - self.yr[0]) * (HEIGHT - 2 * MARGIN)


def _document(body, title, xlabel, ylabel, frame):
    x0, x1, y0, y1 = MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN
    ticks = []
    for i in range(5):
        fx = frame.xr[0] + i / 4 * (frame.xr[1] - frame.xr[0])
        fy = frame.yr[0] + i / 4 * (frame.yr[1] - frame.yr[0])
        ticks.append(f'<text x="{_fmt(frame.x(fx))}" y="{y0 + 16}" font-size="10" '
                     f'text-anchor="middle">{fx:.4g}</text>')
        ticks.append(f'<text x="{x0 - 6}" y="{_fmt(frame.y(fy) + 3)}" font-size="10" '
                     f'text-anchor="end">{fy:.4g}</text>')
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" font-size="14" text-anchor="middle">{escape(title)}</text>',
        f'<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>',
        *ticks,
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 16}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{HEIGHT / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>',
        *body,
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def scatter_svg(report, title=None):
    """Predicted against true values with the ``y = x`` line and R^2 in the corner."""
    if not report.rows:
        raise ValidationError("cannot plot an empty report")
    t = np.array([r["y_true"] for r in report.rows], dtype=np.float64)
    p = np.array([r["y_pred"] for r in report.rows], dtype=np.float64)
    rng = _axis_range(np.concatenate([t, p]))
    frame = _Frame(rng, rng)
    body = [f'<line class="identity" x1="{_fmt(frame.x(rng[0]))}" y1="{_fmt(frame.y(rng[0]))}" '
            f'x2="{_fmt(frame.x(rng[1]))}" y2="{_fmt(frame.y(rng[1]))}" stroke="gray" stroke-dasharray="4 3"/>']
    for r, tv, pv in zip(report.rows, t, p):
        body.append(f'<circle class="point" cx="{_fmt(frame.x(tv))}" cy="{_fmt(frame.y(pv))}" r="3" '
                    f'fill="{PALETTE[0]}"><title>{escape(str(r["id"]))}</title></circle>')
    r2 = report.metrics.get("r2")
    if r2 is not None:
        body.append(f'<text class="r2" x="{MARGIN + 8}" y="{MARGIN + 14}" font-size="12">'
                    f'R² = {r2:.3f}</text>')
    return _document(body, title or f"{report.method}: predicted vs true", "true", "predicted", frame)


def loss_svg(traces, title="training loss"):
    """One epoch-vs-loss polyline per trace (a list or a dict of lists)."""
    if isinstance(traces, dict):
        traces = [traces[k] for k in sorted(traces)]
    elif len(traces) and np.ndim(traces[0]) == 0:
        traces = [traces]
    traces = [np.asarray(tr, dtype=np.float64) for tr in traces if len(tr)]
    if not traces:
        raise ValidationError("cannot plot an empty loss trace")
    longest = max(len(tr) for tr in traces)
    frame = _Frame((1.0, max(2.0, float(longest))), _axis_range(np.concatenate(traces)))
    body = []
    for i, tr in enumerate(traces):
        pts = " ".join(f"{_fmt(frame.x(e))},{_fmt(frame.y(v))}" for e, v in enumerate(tr, start=1))
        body.append(f'<polyline class="loss" points="{pts}" fill="none" '
                    f'stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1"/>')
    return _document(body, title, "epoch", "loss", frame)


def plot(report, kind="scatter"):
    """SVG text for ``kind`` ``scatter`` or ``loss`` (per-fold traces stored in the report)."""
    if kind == "scatter":
        return scatter_svg(report)
    if kind == "loss":
        traces = report.extra.get("loss_traces")
        if not traces:
            raise ValidationError("report carries no loss traces")
        return loss_svg(traces, f"{report.method}: training loss per fold")
    raise ValidationError(f"unknown plot kind {kind!r}")
