"""Self-contained SVG line chart of probe positive/negative log-probs over training."""

from __future__ import annotations

from xml.sax.saxutils import escape

from .errors import ContractError
from .fileio import atomic_write_text
from .trainer import TrainingTrace

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 20, "top": 40, "bottom": 50}
SERIES = (
    ("probe_pos_alp", "positive answers", "#1f77b4"),
    ("probe_neg_alp", "negative answers", "#d62728"),
)


def _fmt(x: float) -> str:
    # fixed precision keeps the bytes stable across platforms
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def trace_svg(trace: TrainingTrace, title: str = "Probe avg log-prob during fine-tuning") -> str:
    """Render the two probe curves; one polyline point per trace row."""
    if not trace.rows:
        raise ContractError("cannot plot an empty trace")
    steps = [r.step for r in trace.rows]
    values = [getattr(r, key) for r in trace.rows for key, _, _ in SERIES]
    x_lo, x_hi = min(steps), max(steps)
    y_lo, y_hi = min(values), max(values)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(step: float) -> float:
        return MARGIN["left"] + plot_w * (step - x_lo) / (x_hi - x_lo)

    def sy(v: float) -> float:
        return MARGIN["top"] + plot_h * (y_hi - v) / (y_hi - y_lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = MARGIN["top"], HEIGHT - MARGIN["bottom"]
    out.append(f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{_fmt(sx(t))}" y="{y1 + 18}" text-anchor="middle">{round(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{x0 - 8}" y="{_fmt(sy(t) + 4)}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">step</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2:.0f})">mean avg log-prob</text>')

    for n, (key, label, colour) in enumerate(SERIES):
        points = " ".join(f"{_fmt(sx(r.step))},{_fmt(sy(getattr(r, key)))}" for r in trace.rows)
        out.append(f'<polyline class="{key}" fill="none" stroke="{colour}" stroke-width="2" points="{points}"/>')
        ly = y0 + 14 + 16 * n
        out.append(f'<line x1="{x1 - 150}" y1="{ly}" x2="{x1 - 130}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{x1 - 124}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(trace: TrainingTrace, path, title: str | None = None) -> None:
    atomic_write_text(path, trace_svg(trace) if title is None else trace_svg(trace, title))
