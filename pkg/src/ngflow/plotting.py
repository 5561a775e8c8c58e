"""Minimal SVG loss curves, written by hand to avoid a plotting dependency."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["loss_curve_svg", "write_loss_svg"]

_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 72, 20, 30, 50

# dash pattern per event kind
_EVENT_STYLE = {
    "expand": ("#c0392b", "6,4"),
    "switch_adam": ("#2471a3", "2,3"),
}


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * abs(hi):
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


def loss_curve_svg(epochs: Sequence[float], losses: Sequence[float],
                   events: Optional[Sequence[tuple[float, str]]] = None,
                   title: str = "", log: Optional[bool] = None) -> str:
    """SVG text of a loss-vs-epoch curve.

    ``log`` defaults to a log axis when every loss is positive.
    ``events`` are ``(epoch, label)`` pairs drawn as dashed vertical lines;
    labels starting with ``expand`` and ``switch_adam`` get distinct styles.
    """
    x = np.asarray(epochs, dtype=np.float64)
    y = np.asarray(losses, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("epochs and losses differ in length")
    if log is None:
        log = bool(y.size) and bool(np.all(y > 0))
    yy = np.log10(y) if log else y
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM
    if y.size:
        x0, x1 = float(x.min()), float(x.max())
        y0, y1 = float(yy.min()), float(yy.max())
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pad = 0.04 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

        def sx(v):
            return _LEFT + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return _TOP + (y1 - v) / (y1 - y0) * ph

        if log:
            yticks = list(range(math.ceil(y0), math.floor(y1) + 1)) or [round(y0)]
            ylabels = [f"1e{t}" for t in yticks]
        else:
            yticks = _nice_ticks(y0, y1)
            ylabels = [_fmt(t) for t in yticks]
        for t, lab in zip(yticks, ylabels):
            py = sy(t)
            if _TOP <= py <= _TOP + ph:
                parts.append(f'<line x1="{_LEFT}" y1="{py:.2f}" x2="{_LEFT + pw}" y2="{py:.2f}" '
                             'stroke="#ddd"/>')
                parts.append(f'<text x="{_LEFT - 6}" y="{py + 4:.2f}" text-anchor="end">{lab}</text>')
        for t in _nice_ticks(x0, x1):
            px = sx(t)
            parts.append(f'<text x="{px:.2f}" y="{_TOP + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
        for ex, label in events or ():
            kind = "expand" if label.startswith("expand") else label
            color, dash = _EVENT_STYLE.get(kind, ("#888", "1,2"))
            px = sx(float(ex))
            parts.append(f'<line x1="{px:.2f}" y1="{_TOP}" x2="{px:.2f}" y2="{_TOP + ph}" '
                         f'stroke="{color}" stroke-dasharray="{dash}"><title>{escape(label)}</title></line>')
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, yy))
        parts.append(f'<polyline fill="none" stroke="black" stroke-width="1.2" points="{pts}"/>')
    parts.append(f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{_LEFT + pw / 2}" y="{_H - 12}" text-anchor="middle">epoch</text>')
    ylab = "loss (log scale)" if log else "loss"
    parts.append(f'<text x="16" y="{_TOP + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {_TOP + ph / 2})">{ylab}</text>')
    if title:
        parts.append(f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_loss_svg(path, record, title: str = "") -> None:
    """Plot a :class:`~ngflow.optimizers.TrainRecord` with its event tags."""
    epochs = [r["epoch"] for r in record.rows]
    losses = [r["loss"] for r in record.rows]
    events = []
    for r in record.rows:
        for tag in filter(None, r["event"].split(";")):
            if tag.startswith("expand") or tag == "switch_adam":
                events.append((r["epoch"], tag))
    Path(path).write_text(loss_curve_svg(epochs, losses, events, title))
