"""Time-space diagram of one recorded run, as a deterministic SVG string.

Time runs left to right, line position bottom to top (cumulative metres from
the down-end terminal).  Each train is a thin colored polyline sampled every
few seconds and broken where the train is absent (absorbed into a depot);
disruptions are bold black boxes over the blocked span; stations get light
horizontal gridlines.  The output is a pure function of the record and the
route geometry: same inputs, same bytes.
"""
from __future__ import annotations

import math
from typing import List, Tuple

from .route_model import RouteModel
from .runner import RunRecord
from .timetable import s_to_hms

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 20, 34


def _fmt(x: float) -> str:
    return f"{x:.1f}"


def render_time_space_svg(record: RunRecord, model: RouteModel, *,
                          width: int = 1100, height: int = 560,
                          sample_s: int = 5) -> str:
    t0, horizon = record.clock0, record.horizon_s
    pos_lo, pos_hi = model.line_low, model.line_high
    plot_w = width - MARGIN_L - MARGIN_R
    plot_h = height - MARGIN_T - MARGIN_B

    def sx(t: float) -> float:
        return MARGIN_L + plot_w * (t - t0) / max(horizon, 1)

    def sy(pos: float) -> float:
        return MARGIN_T + plot_h * (1.0 - (pos - pos_lo) / (pos_hi - pos_lo))

    out: List[str] = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
               f'height="{height}" viewBox="0 0 {width} {height}">')
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" '
               'fill="white"/>')

    # station gridlines and labels
    for st in model.ordered_stations():
        y = sy(model.station_pos[st.id])
        out.append(f'<line x1="{_fmt(MARGIN_L)}" y1="{_fmt(y)}" '
                   f'x2="{_fmt(width - MARGIN_R)}" y2="{_fmt(y)}" '
                   'stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{_fmt(MARGIN_L - 6)}" y="{_fmt(y + 4)}" '
                   'text-anchor="end" font-family="sans-serif" '
                   f'font-size="11" fill="#333333">{st.id}</text>')

    # hourly time ticks
    first_tick = int(math.ceil(t0 / 3600.0)) * 3600
    for tick in range(first_tick, t0 + horizon + 1, 3600):
        x = sx(tick)
        out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(MARGIN_T)}" '
                   f'x2="{_fmt(x)}" y2="{_fmt(height - MARGIN_B)}" '
                   'stroke="#eeeeee" stroke-width="1"/>')
        label = s_to_hms(tick % 86400)[:5]
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(height - MARGIN_B + 14)}" '
                   'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11" fill="#333333">{label}</text>')

    # frame
    out.append(f'<rect x="{_fmt(MARGIN_L)}" y="{_fmt(MARGIN_T)}" '
               f'width="{_fmt(plot_w)}" height="{_fmt(plot_h)}" '
               'fill="none" stroke="#999999" stroke-width="1"/>')

    # train trajectories
    positions = record.positions
    for col, train in enumerate(record.train_ids):
        color = PALETTE[col % len(PALETTE)]
        segments: List[List[Tuple[float, float]]] = [[]]
        rows = list(range(0, positions.shape[0], sample_s))
        if rows[-1] != positions.shape[0] - 1:
            rows.append(positions.shape[0] - 1)
        for i in rows:
            p = positions[i, col]
            if math.isnan(p):
                if segments[-1]:
                    segments.append([])
                continue
            segments[-1].append((sx(t0 + i), sy(p)))
        for seg in segments:
            if len(seg) < 2:
                continue
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in seg)
            out.append(f'<polyline points="{pts}" fill="none" '
                       f'stroke="{color}" stroke-width="1"/>')
        # legend entry
        lx = MARGIN_L + 8 + col * 54
        out.append(f'<line x1="{_fmt(lx)}" y1="{_fmt(MARGIN_T - 8)}" '
                   f'x2="{_fmt(lx + 14)}" y2="{_fmt(MARGIN_T - 8)}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_fmt(lx + 18)}" y="{_fmt(MARGIN_T - 4)}" '
                   'font-family="sans-serif" font-size="10" '
                   f'fill="#333333">{train}</text>')

    # disruptions on top, bold black
    for start_s, end_s, lo, hi in record.disruption_spans:
        x0 = sx(max(start_s, t0))
        x1 = sx(min(end_s, t0 + horizon))
        if x1 <= x0:
            continue
        y0, y1 = sy(hi), sy(lo)
        out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" '
                   f'width="{_fmt(x1 - x0)}" height="{_fmt(y1 - y0)}" '
                   'fill="black" fill-opacity="0.85" stroke="black" '
                   'stroke-width="2"/>')

    out.append("</svg>")
    return "\n".join(out) + "\n"
