"""Zig-zag coverage path generation with curvature-bounded turns.

Boustrophedon lanes run along the arena's long axis, spaced by the camera
footprint and the overlap factor, joined by semicircular turns flown at the
turning speed. The time parametrization ramps between scan and turn speeds
under the acceleration limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PlanningError(ValueError):
    pass


@dataclass
class CoveragePath:
    """Time-parametrized sweep: columns are (t, x, y, z, v, heading)."""

    points: np.ndarray
    lane_spacing: float
    altitude: float
    turn_radius: float
    footprint_half_width: float

    @property
    def duration(self) -> float:
        return float(self.points[-1, 0])

    def reference_at(self, t: float):
        """Interpolated (x, y, z, v, heading) at time t, clamped to the ends."""
        ts = self.points[:, 0]
        i = int(np.searchsorted(ts, t))
        if i <= 0:
            row = self.points[0]
            return row[1:4].copy(), row[4], row[5]
        if i >= len(ts):
            row = self.points[-1]
            return row[1:4].copy(), row[4], row[5]
        a, b = self.points[i - 1], self.points[i]
        f = (t - a[0]) / max(b[0] - a[0], 1e-9)
        pos = a[1:4] + f * (b[1:4] - a[1:4])
        v = a[4] + f * (b[4] - a[4])
        h0, h1 = a[5], b[5]
        dh = math.remainder(h1 - h0, 2 * math.pi)
        return pos, float(v), h0 + f * dh

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("t,x,y,z,v\n")
            for row in self.points:
                f.write("%.3f,%.4f,%.4f,%.4f,%.4f\n" % tuple(row[:5]))


def plan_scan(
    bounds: tuple,
    fov_h: float,
    altitude: float,
    v_scan: float = 3.0,
    v_turn: float = 1.5,
    a_max: float = 2.0,
    overlap: float = 0.5,
    sample_ds: float = 0.5,
) -> CoveragePath:
    """Boustrophedon sweep of `bounds` with turn radius v_turn**2 / a_max."""
    if altitude <= 0:
        raise PlanningError("altitude must be positive")
    x0, y0, x1, y1 = bounds
    if x1 <= x0 or y1 <= y0:
        raise PlanningError("empty bounds")
    rho = v_turn ** 2 / a_max
    half_fov = altitude * math.tan(fov_h / 2.0)
    spacing = 2.0 * half_fov * overlap
    # Lanes run along the long axis.
    flip = (x1 - x0) < (y1 - y0)
    if flip:
        x0, y0, x1, y1 = y0, x0, y1, x1
    length = x1 - x0
    width = y1 - y0
    inset = min(spacing / 2.0, width / 2.0)
    usable = width - 2.0 * inset
    if usable <= spacing / 2.0:
        lanes_y = [y0 + width / 2.0]
    else:
        n = max(2, int(math.ceil(usable / spacing)) + 1)
        lanes_y = list(np.linspace(y0 + inset, y1 - inset, n))
    if len(lanes_y) > 1:
        gap = lanes_y[1] - lanes_y[0]
        if gap / 2.0 + 1e-9 < rho:
            raise PlanningError(
                f"lane gap {gap:.2f} m too narrow for turn radius {rho:.2f} m"
            )
        turn_r = gap / 2.0
    else:
        turn_r = rho
    xa, xb = x0 + inset, x1 - inset
    if xb - xa < 0.5 * length:
        xa, xb = x0, x1  # inset would eat a short lane; fly it end to end
    # Geometry: straight lanes stitched with semicircular end turns.
    pts: list[tuple] = []          # (x, y, target_speed)
    for i, y in enumerate(lanes_y):
        xs = (xa, xb) if i % 2 == 0 else (xb, xa)
        n_straight = max(2, int(abs(xs[1] - xs[0]) / sample_ds) + 1)
        for x in np.linspace(xs[0], xs[1], n_straight):
            pts.append((x, y, v_scan))
        if i + 1 < len(lanes_y):
            cx = xs[1]
            cy = 0.5 * (y + lanes_y[i + 1])
            r = 0.5 * (lanes_y[i + 1] - y)
            sweep = np.linspace(-math.pi / 2, math.pi / 2, 12)
            sgn = 1.0 if i % 2 == 0 else -1.0
            for a in sweep[1:-1]:
                pts.append((cx + sgn * r * math.cos(a), cy + r * math.sin(a),
                            v_turn))
    arr = np.array(pts)
    if flip:
        arr = arr[:, [1, 0, 2]]
    xy = arr[:, :2]
    targets = arr[:, 2]
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-9])
    xy = xy[keep]
    targets = targets[keep]
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    # Speed profile: cap by targets, then forward/backward acceleration limits.
    v = targets.copy()
    v[0] = min(v[0], v_turn)
    v[-1] = min(v[-1], v_turn)
    for i in range(len(v) - 1):
        v[i + 1] = min(v[i + 1], math.sqrt(v[i] ** 2 + 2 * a_max * seg[i]))
    for i in range(len(v) - 2, -1, -1):
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2 * a_max * seg[i]))
    t = np.zeros(len(v))
    for i in range(len(seg)):
        t[i + 1] = t[i] + seg[i] / max(0.5 * (v[i] + v[i + 1]), 1e-6)
    # Heading keeps the wide camera axis across track.
    d = np.diff(xy, axis=0)
    travel = np.arctan2(d[:, 1], d[:, 0])
    travel = np.concatenate([travel, travel[-1:]])
    heading = travel + math.pi / 2
    out = np.column_stack([
        t, xy[:, 0], xy[:, 1], np.full(len(v), altitude), v, heading,
    ])
    return CoveragePath(points=out, lane_spacing=spacing, altitude=altitude,
                        turn_radius=turn_r, footprint_half_width=half_fov)
