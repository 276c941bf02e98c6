"""SVG rendering of the four token streams of one scene.

Three strip charts share the token axis: position, segment and type id per
valid token, each dot coloured by its instance id.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .scene import SceneConfig, TokenizedScene

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

_STRIP_H = 120
_MARGIN_L = 70
_MARGIN_T = 30
_GAP = 30
_WIDTH = 900


def instance_colour(instance: int) -> str:
    return "#cccccc" if instance <= 0 else PALETTE[(instance - 1) % len(PALETTE)]


def tokens_svg(tokens: TokenizedScene, cfg: SceneConfig, title: str = "") -> str:
    if tokens.position.ndim != 1:
        raise ValueError("render one scene at a time")
    length = len(tokens)
    strips = [
        ("position", tokens.position, cfg.position_vocab - 1),
        ("segment", tokens.segment, cfg.segment_vocab - 1),
        ("type", tokens.type, cfg.type_vocab - 1),
    ]
    plot_w = _WIDTH - _MARGIN_L - 20
    height = _MARGIN_T + len(strips) * (_STRIP_H + _GAP) + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{height}" viewBox="0 0 {_WIDTH} {height}">',
        f'<rect width="{_WIDTH}" height="{height}" fill="white"/>',
        f'<text x="{_MARGIN_L}" y="20" font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]
    valid = np.flatnonzero(tokens.mask)
    step = plot_w / max(length, 1)
    for row, (name, values, top) in enumerate(strips):
        y0 = _MARGIN_T + row * (_STRIP_H + _GAP)
        out.append(f'<rect x="{_MARGIN_L}" y="{y0}" width="{plot_w}" height="{_STRIP_H}" fill="none" stroke="#444"/>')
        out.append(
            f'<text x="{_MARGIN_L - 8}" y="{y0 + _STRIP_H / 2:.1f}" font-family="sans-serif" font-size="12" '
            f'text-anchor="end">{name}</text>'
        )
        out.append(
            f'<text x="{_MARGIN_L - 8}" y="{y0 + 10}" font-family="sans-serif" font-size="9" text-anchor="end">{top}</text>'
        )
        out.append(
            f'<text x="{_MARGIN_L - 8}" y="{y0 + _STRIP_H}" font-family="sans-serif" font-size="9" text-anchor="end">1</text>'
        )
        span = max(top - 1, 1)
        for i in valid:
            x = _MARGIN_L + (i + 0.5) * step
            y = y0 + _STRIP_H - (int(values[i]) - 1) / span * (_STRIP_H - 8) - 4
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{instance_colour(int(tokens.instance[i]))}"/>')
    # legend: one swatch per instance id present
    ly = height - 15
    for k, inst in enumerate(sorted({int(v) for v in tokens.instance[valid]})):
        lx = _MARGIN_L + k * 90
        kind = "actor" if inst <= cfg.persons else "object"
        out.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{instance_colour(inst)}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly}" font-family="sans-serif" font-size="11">{kind} {inst}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
