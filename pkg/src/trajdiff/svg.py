"""Dependency-free SVG rendering of 2-D trajectory overlays."""

from __future__ import annotations

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf")


def _path(points, stroke, width, opacity=1.0, dash=None) -> str:
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{stroke}" stroke-width="{width}" '
            f'stroke-opacity="{opacity:.2f}"{dash_attr} points="{coords}" />')


def render_window(observed_abs: np.ndarray, candidates: np.ndarray,
                  gt_abs: np.ndarray | None = None, size: int = 640,
                  margin: float = 0.05) -> str:
    """Observed history, candidate futures and optional ground truth.

    ``observed_abs`` is [N, T, 2], ``candidates`` [N, M, T', 2] and
    ``gt_abs`` [N, T', 2], all in meters.  One color per pedestrian;
    candidates are drawn translucent, ground truth dashed.
    """
    pieces = [observed_abs.reshape(-1, 2), candidates.reshape(-1, 2)]
    if gt_abs is not None:
        pieces.append(gt_abs.reshape(-1, 2))
    allpts = np.concatenate(pieces, axis=0)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    pad = margin * span.max()
    lo, span = lo - pad, span + 2 * pad
    scale = size / span.max()

    def to_px(pts):
        # y grows downward in SVG
        xy = (np.asarray(pts) - lo) * scale
        return [(float(x), float(size - y)) for x, y in xy]

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white" />']
    for n in range(observed_abs.shape[0]):
        color = _COLORS[n % len(_COLORS)]
        for m in range(candidates.shape[1]):
            tail = np.concatenate([observed_abs[n, -1:], candidates[n, m]], axis=0)
            lines.append(_path(to_px(tail), color, 1.0, opacity=0.35))
        lines.append(_path(to_px(observed_abs[n]), color, 2.5))
        if gt_abs is not None:
            tail = np.concatenate([observed_abs[n, -1:], gt_abs[n]], axis=0)
            lines.append(_path(to_px(tail), "#333333", 1.5, dash="6,4"))
    lines.append("</svg>")
    return "\n".join(lines)
