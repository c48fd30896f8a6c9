"""Hand-built SVG line charts of a training metric stream.

Three stacked panels share the epoch axis: accuracy (train/test), loss
(train/test, log scale) and MED.  Output depends only on the input rows, so
identical inputs give identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

from .trainer import MetricsRow

WIDTH = 720
PANEL_H = 200
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 30, 40
GAP = 50
LOSS_FLOOR = 1e-12

COLORS = {
    "train_acc": "#1f77b4",
    "test_acc": "#d62728",
    "train_loss": "#1f77b4",
    "test_loss": "#d62728",
    "med": "#2ca02c",
}


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    log: bool = False

    def frac(self, v: float) -> float:
        if self.log:
            v, lo, hi = math.log10(v), math.log10(self.lo), math.log10(self.hi)
        else:
            lo, hi = self.lo, self.hi
        return 0.5 if hi == lo else (v - lo) / (hi - lo)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_step(span: float, target: int = 5) -> float:
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if raw <= m * mag:
            return m * mag
    return 10 * mag


def linear_axis(values: Sequence[float], lo: float | None = None, hi: float | None = None) -> tuple[Axis, list[float]]:
    vmin = min(values) if lo is None else lo
    vmax = max(values) if hi is None else hi
    if vmax <= vmin:
        vmax = vmin + 1.0
    step = _nice_step(vmax - vmin)
    a = math.floor(vmin / step + 1e-9) * step
    b = math.ceil(vmax / step - 1e-9) * step
    n = int(round((b - a) / step))
    return Axis(a, b), [a + k * step for k in range(n + 1)]


def log_axis(values: Sequence[float]) -> tuple[Axis, list[float]]:
    pos = [max(v, LOSS_FLOOR) for v in values]
    a = math.floor(math.log10(min(pos)))
    b = math.ceil(math.log10(max(pos)))
    if b == a:
        b += 1
    stride = max(1, math.ceil((b - a) / 8))
    return Axis(10.0**a, 10.0**b, log=True), [10.0**k for k in range(a, b + 1, stride)]


def _tick_label(v: float, log: bool) -> str:
    if log:
        return f"1e{round(math.log10(v))}"
    if v == int(v):
        return str(int(v))
    return f"{v:g}"


class _Panel:
    def __init__(self, top: float, x_axis: Axis, x_ticks: list[float], y_axis: Axis, y_ticks: list[float], title: str):
        self.top, self.x, self.y = top, x_axis, y_axis
        self.x_ticks, self.y_ticks, self.title = x_ticks, y_ticks, title
        self.w = WIDTH - MARGIN_L - MARGIN_R

    def px(self, v: float) -> float:
        return MARGIN_L + self.x.frac(v) * self.w

    def py(self, v: float) -> float:
        return self.top + (1.0 - self.y.frac(v)) * PANEL_H

    def frame(self, pid: str) -> list[str]:
        out = [f'<g id="{pid}-axes" class="axes">']
        out.append(
            f'<rect x="{_fmt(MARGIN_L)}" y="{_fmt(self.top)}" width="{_fmt(self.w)}" height="{_fmt(PANEL_H)}" '
            'fill="none" stroke="#000" stroke-width="1"/>'
        )
        for t in self.y_ticks:
            y = self.py(t)
            out.append(f'<line x1="{_fmt(MARGIN_L - 4)}" y1="{_fmt(y)}" x2="{_fmt(MARGIN_L)}" y2="{_fmt(y)}" stroke="#000"/>')
            out.append(
                f'<text class="ytick" x="{_fmt(MARGIN_L - 7)}" y="{_fmt(y + 4)}" text-anchor="end">'
                f"{_tick_label(t, self.y.log)}</text>"
            )
        bottom = self.top + PANEL_H
        for t in self.x_ticks:
            x = self.px(t)
            out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(bottom)}" x2="{_fmt(x)}" y2="{_fmt(bottom + 4)}" stroke="#000"/>')
            out.append(
                f'<text class="xtick" x="{_fmt(x)}" y="{_fmt(bottom + 16)}" text-anchor="middle">'
                f"{_tick_label(t, self.x.log)}</text>"
            )
        out.append(
            f'<text class="panel-title" x="{_fmt(MARGIN_L)}" y="{_fmt(self.top - 8)}">{escape(self.title)}</text>'
        )
        out.append("</g>")
        return out

    def series(self, sid: str, label: str, xs: Sequence[float], ys: Sequence[float], slot: int) -> list[str]:
        color = COLORS.get(sid, "#000")
        pts = " ".join(f"{_fmt(self.px(x))},{_fmt(self.py(y))}" for x, y in zip(xs, ys))
        ly = self.top + 14 + 18 * slot
        lx = WIDTH - MARGIN_R + 12
        return [
            f'<g id="series-{sid}" class="series" data-label="{escape(label)}">',
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>',
            f'<line x1="{_fmt(lx)}" y1="{_fmt(ly - 4)}" x2="{_fmt(lx + 18)}" y2="{_fmt(ly - 4)}" stroke="{color}" stroke-width="2"/>',
            f'<text class="legend" x="{_fmt(lx + 24)}" y="{_fmt(ly)}">{escape(label)}</text>',
            "</g>",
        ]


def render_svg(
    rows: Sequence[MetricsRow],
    log_x: bool = False,
    med_scale: float = 1.0,
    med_label: str = "MED",
    title: str | None = None,
) -> str:
    """SVG document for a metric stream.

    ``med_scale`` multiplies the MED column (pass ``p`` to plot the raw sum
    when only the mean was logged).  With ``log_x`` epoch 0 is drawn at 1.
    """
    if not rows:
        raise ValueError("no metric rows to plot")
    rows = sorted(rows, key=lambda r: r.epoch)
    if log_x:
        xs = [max(float(r.epoch), 1.0) for r in rows]
        lo, hi = math.floor(math.log10(min(xs))), max(math.ceil(math.log10(max(xs))), 1)
        x_axis = Axis(10.0**lo, 10.0**hi, log=True)
        x_ticks = [10.0**k for k in range(lo, hi + 1)]
    else:
        xs = [float(r.epoch) for r in rows]
        x_axis, x_ticks = linear_axis(xs, lo=0.0)

    acc_axis, acc_ticks = linear_axis([0.0, 1.0], lo=0.0, hi=1.0)
    losses = [max(v, LOSS_FLOOR) for r in rows for v in (r.train_loss, r.test_loss)]
    loss_axis, loss_ticks = log_axis(losses)
    meds = [r.med * med_scale for r in rows]
    med_axis, med_ticks = linear_axis(meds, lo=0.0)

    height = MARGIN_T + 3 * PANEL_H + 2 * GAP + MARGIN_B
    tops = [MARGIN_T + k * (PANEL_H + GAP) for k in range(3)]
    panels = [
        ("accuracy", _Panel(tops[0], x_axis, x_ticks, acc_axis, acc_ticks, "accuracy")),
        ("loss", _Panel(tops[1], x_axis, x_ticks, loss_axis, loss_ticks, "loss (log scale)")),
        ("med", _Panel(tops[2], x_axis, x_ticks, med_axis, med_ticks, med_label)),
    ]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">',
        '<rect width="100%" height="100%" fill="#fff"/>',
    ]
    if title:
        out.append(f'<text id="title" x="{WIDTH // 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>')
    series = {
        "accuracy": [("train_acc", "train acc", [r.train_acc for r in rows]), ("test_acc", "test acc", [r.test_acc for r in rows])],
        "loss": [
            ("train_loss", "train loss", [max(r.train_loss, LOSS_FLOOR) for r in rows]),
            ("test_loss", "test loss", [max(r.test_loss, LOSS_FLOOR) for r in rows]),
        ],
        "med": [("med", med_label, meds)],
    }
    for pid, panel in panels:
        out.append(f'<g id="panel-{pid}">')
        out.extend(panel.frame(pid))
        for slot, (sid, label, ys) in enumerate(series[pid]):
            out.extend(panel.series(sid, label, xs, ys, slot))
        out.append("</g>")
    bottom = tops[2] + PANEL_H
    xlabel = "epoch (log scale)" if log_x else "epoch"
    out.append(f'<text id="xlabel" x="{_fmt(MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2)}" y="{_fmt(bottom + 34)}" text-anchor="middle">{xlabel}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
