"""Dependency-free SVG export: track outline with car trajectories as polylines."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .track import Track, frenet_to_global

CAR_COLOURS = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _points(xs, ys, to_px) -> str:
    return " ".join(f"{a:.2f},{b:.2f}" for a, b in (to_px(x, y) for x, y in zip(xs, ys)))


def track_svg(
    track: Track,
    trajectories: Sequence[np.ndarray] = (),
    labels: Optional[Sequence[str]] = None,
    comment: Optional[str] = None,
    width_px: int = 800,
) -> str:
    """Render the track borders and one ``(T, 2)`` array of global ``x, y`` per car."""
    xy = track.points[:, :2]
    half = track.w / 2.0
    left = xy + track.normals * half[:, None]
    right = xy - track.normals * half[:, None]
    pts = np.vstack([left, right] + [np.asarray(t)[:, :2] for t in trajectories if len(t)])
    lo = pts.min(axis=0) - 2.0
    hi = pts.max(axis=0) + 2.0
    scale = width_px / max(hi[0] - lo[0], 1e-9)
    height_px = int(round((hi[1] - lo[1]) * scale))

    def to_px(x, y):
        # flip y so north is up
        return (x - lo[0]) * scale, (hi[1] - y) * scale

    tag = "polygon" if track.closed else "polyline"
    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if comment:
        out.append(f"<!-- {comment.replace('--', '-')} -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" height="{height_px}" '
               f'viewBox="0 0 {width_px} {height_px}">')
    out.append('<rect width="100%" height="100%" fill="white"/>')
    for border in (left, right):
        out.append(f'<{tag} points="{_points(border[:, 0], border[:, 1], to_px)}" '
                   'fill="none" stroke="black" stroke-width="1.5"/>')
    out.append(f'<{tag} points="{_points(xy[:, 0], xy[:, 1], to_px)}" '
               'fill="none" stroke="#999" stroke-width="0.8" stroke-dasharray="4,4"/>')
    for k, traj in enumerate(trajectories):
        traj = np.asarray(traj)
        if not len(traj):
            continue
        colour = CAR_COLOURS[k % len(CAR_COLOURS)]
        title = f"<title>{labels[k]}</title>" if labels else ""
        out.append(f'<polyline points="{_points(traj[:, 0], traj[:, 1], to_px)}" fill="none" '
                   f'stroke="{colour}" stroke-width="2">{title}</polyline>')
        x0, y0 = to_px(traj[0, 0], traj[0, 1])
        out.append(f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="4" fill="{colour}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def race_trajectories(track: Track, states: np.ndarray) -> list[np.ndarray]:
    """Global ``(T+1, 2)`` paths of every car from a ``(T+1, n, 6)`` state array."""
    paths = []
    for i in range(states.shape[1]):
        p_x = states[:, i, 0]
        if track.closed:
            p_x = np.mod(p_x, track.length)
        else:
            p_x = np.clip(p_x, 0.0, track.length)
        x, y = frenet_to_global(track, p_x, states[:, i, 1])
        paths.append(np.column_stack([x, y]))
    return paths
