"""Bank of linear Kalman filters over brick and wall hypotheses.

Detections pass admission preconditions, then either correct their nearest
matching hypothesis or spawn a new one. A periodic merge pass combines
hypotheses that drifted together, weighting states by correction counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .arena import BrickColor
from .perception import BrickDetection, WallDetection


@dataclass
class DetMapParams:
    process_noise: float = 1e-4          # per tick, every state dimension
    meas_noise_pos: float = 0.1          # m
    meas_noise_heading: float = 0.1      # rad
    meas_noise_length: float = 0.5       # m, wall length channel
    brick_gate: float = 0.4              # nearest-neighbor gate, m
    wall_heading_gate: float = 0.5       # rad (undirected)
    wall_overlap_min: float = 0.5        # of the shorter segment
    merge_radius_brick: float = 0.25
    merge_radius_wall: float = 1.0
    merge_heading_gate: float = 0.4
    merge_period_s: float = 2.0
    other_target_radius: float = 5.0
    ban_radius: float = 0.4
    wall_height_range: tuple = (1.0, 2.3)


@dataclass
class Hypothesis:
    """One tracked object; state is (x, y, z, heading[, length])."""

    kind: str                      # "brick" | "wall"
    color: Optional[BrickColor]
    x: np.ndarray                  # state vector
    P: np.ndarray                  # covariance
    corrections: int = 1
    banned: bool = False

    @property
    def xy(self) -> np.ndarray:
        return self.x[:2]

    @property
    def heading(self) -> float:
        return float(self.x[3]) % math.pi

    @property
    def length(self) -> float:
        return float(self.x[4]) if len(self.x) > 4 else 0.0


@dataclass
class AdmitResult:
    accepted: bool
    reason: Optional[str] = None


def _wrap_line(a: float) -> float:
    """Wrap an undirected-orientation innovation to (-pi/2, pi/2]."""
    r = math.remainder(a, math.pi)
    if r <= -math.pi / 2:
        r += math.pi
    return r


class DetectionMap:
    def __init__(self, params: DetMapParams = None):
        self.params = params or DetMapParams()
        self.hypotheses: list[Hypothesis] = []
        self._since_merge = 0.0

    # ------------------------------------------------------------ admission

    def admit(self, det, *, other_targets=(), bounds=None,
              banned_points=()) -> AdmitResult:
        """Precondition chain; rejects report the first violated rule."""
        p = self.params
        center = np.asarray(det.center, dtype=float)
        for tgt in other_targets:
            if np.linalg.norm(center - np.asarray(tgt)) < p.other_target_radius:
                return AdmitResult(False, "near_other_uav_target")
        if bounds is not None:
            x0, y0, x1, y1 = bounds
            if not (x0 <= center[0] <= x1 and y0 <= center[1] <= y1):
                return AdmitResult(False, "outside_challenge_area")
        if isinstance(det, BrickDetection):
            for b in banned_points:
                if np.linalg.norm(center - np.asarray(b)) < p.ban_radius:
                    return AdmitResult(False, "previous_grasp_failed")
            for h in self.hypotheses:
                if (h.kind == "brick" and h.banned
                        and np.linalg.norm(center - h.xy) < p.ban_radius):
                    return AdmitResult(False, "previous_grasp_failed")
        if isinstance(det, WallDetection):
            lo, hi = p.wall_height_range
            if not (lo <= det.z <= hi):
                return AdmitResult(False, "height_out_of_range")
        return AdmitResult(True)

    # ------------------------------------------------------------ filtering

    def predict(self, dt_ticks: int = 1):
        q = self.params.process_noise * dt_ticks
        for h in self.hypotheses:
            h.P[np.diag_indices_from(h.P)] += q

    def correct_or_spawn(self, det) -> Hypothesis:
        if isinstance(det, BrickDetection):
            return self._handle_brick(det)
        if isinstance(det, WallDetection):
            return self._handle_wall(det)
        raise TypeError(f"unsupported detection type: {type(det)!r}")

    def _meas_cov(self, det, n: int) -> np.ndarray:
        p = self.params
        diag = [p.meas_noise_pos ** 2] * 3 + [p.meas_noise_heading ** 2]
        if n > 4:
            diag.append(p.meas_noise_length ** 2)
        R = np.diag(diag)
        weight = getattr(det, "weight", 1.0) or 1.0
        return R / weight  # low-quality detections count as noisier

    def _handle_brick(self, det: BrickDetection) -> Hypothesis:
        p = self.params
        best = None
        for h in self.hypotheses:
            if h.kind != "brick" or h.banned or h.color != det.color:
                continue
            d = float(np.linalg.norm(h.xy - det.center))
            if d < p.brick_gate and (best is None or d < best[0]):
                best = (d, h)
        z = np.array([det.center[0], det.center[1], det.z, det.heading])
        if best is None:
            P = self._meas_cov(det, 4).copy()
            h = Hypothesis(kind="brick", color=det.color, x=z.copy(), P=P)
            self.hypotheses.append(h)
            return h
        h = best[1]
        self._kalman_correct(h, z, self._meas_cov(det, 4), heading_index=3)
        return h

    def _handle_wall(self, det: WallDetection) -> Hypothesis:
        p = self.params
        best = None
        for h in self.hypotheses:
            if h.kind != "wall":
                continue
            if _line_diff(h.heading, det.heading) > p.wall_heading_gate:
                continue
            overlap = _projection_overlap(
                h.xy, h.heading, h.length, det.center, det.heading, det.length
            )
            shorter = max(min(h.length, det.length), 1e-6)
            if overlap / shorter < p.wall_overlap_min:
                continue
            d = float(np.linalg.norm(h.xy - det.center))
            if best is None or d < best[0]:
                best = (d, h)
        z = np.array([det.center[0], det.center[1], det.z, det.heading, det.length])
        if best is None:
            P = self._meas_cov(det, 5).copy()
            h = Hypothesis(kind="wall", color=None, x=z.copy(), P=P)
            self.hypotheses.append(h)
            return h
        h = best[1]
        self._kalman_correct(h, z, self._meas_cov(det, 5), heading_index=3)
        return h

    @staticmethod
    def _kalman_correct(h: Hypothesis, z: np.ndarray, R: np.ndarray,
                        heading_index: int):
        # Static-target model: H = I; innovation wrapped on the heading
        # channel because orientations live on a half-circle.
        y = z - h.x
        y[heading_index] = _wrap_line(y[heading_index])
        S = h.P + R
        K = h.P @ np.linalg.inv(S)
        h.x = h.x + K @ y
        h.x[heading_index] %= math.pi
        h.P = (np.eye(len(h.x)) - K) @ h.P
        h.corrections += 1

    # ------------------------------------------------------------ merging

    def merge_pass(self):
        """Combine nearby same-kind hypotheses, weighted by corrections.

        Connected groups under the merge radius collapse to their
        corrections-weighted mean, which makes the result independent of
        the order in which pairs are considered. Repeats to a fixed point.
        """
        p = self.params
        changed = True
        while changed:
            changed = False
            n = len(self.hypotheses)
            parent = list(range(n))

            def find(i):
                while parent[i] != i:
                    parent[i] = parent[parent[i]]
                    i = parent[i]
                return i

            for i in range(n):
                for j in range(i + 1, n):
                    a, b = self.hypotheses[i], self.hypotheses[j]
                    if a.kind != b.kind or a.color != b.color:
                        continue
                    radius = (p.merge_radius_brick if a.kind == "brick"
                              else p.merge_radius_wall)
                    if np.linalg.norm(a.xy - b.xy) > radius:
                        continue
                    if (a.kind == "wall"
                            and _line_diff(a.heading, b.heading) > p.merge_heading_gate):
                        continue
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[rj] = ri
                        changed = True
            if not changed:
                break
            groups: dict[int, list[Hypothesis]] = {}
            for i, h in enumerate(self.hypotheses):
                groups.setdefault(find(i), []).append(h)
            merged = []
            for members in groups.values():
                if len(members) == 1:
                    merged.append(members[0])
                else:
                    merged.append(_merge_group(members))
            self.hypotheses = merged

    def tick(self, dt: float):
        self.predict(1)
        self._since_merge += dt
        if self._since_merge >= self.params.merge_period_s:
            self._since_merge = 0.0
            self.merge_pass()

    # ------------------------------------------------------------ queries

    def bricks(self, min_corrections: int = 1) -> list[Hypothesis]:
        return [h for h in self.hypotheses
                if h.kind == "brick" and h.corrections >= min_corrections]

    def walls(self, min_corrections: int = 1) -> list[Hypothesis]:
        return [h for h in self.hypotheses
                if h.kind == "wall" and h.corrections >= min_corrections]

    def ban_near(self, point, radius: float = None):
        """Mark hypotheses near a failed grasp location as off limits."""
        radius = radius if radius is not None else self.params.ban_radius
        for h in self.hypotheses:
            if h.kind == "brick" and np.linalg.norm(h.xy - np.asarray(point)) < radius:
                h.banned = True

    def snapshot(self) -> dict:
        return {
            "hypotheses": [
                {
                    "kind": h.kind,
                    "color": h.color.value if h.color else None,
                    "state": [round(float(v), 6) for v in h.x],
                    "corrections": h.corrections,
                    "banned": h.banned,
                }
                for h in self.hypotheses
            ]
        }


def _merge_group(members: list[Hypothesis]) -> Hypothesis:
    dims = max(len(h.x) for h in members)
    total = sum(h.corrections for h in members)
    x = np.zeros(dims)
    P = np.zeros((dims, dims))
    sin2 = cos2 = 0.0
    for h in members:
        w = h.corrections / total
        v = np.zeros(dims)
        v[: len(h.x)] = h.x
        x += w * np.pad(v[:dims], (0, 0))
        Pp = np.zeros((dims, dims))
        Pp[: len(h.x), : len(h.x)] = h.P
        P += w * Pp
        sin2 += h.corrections * math.sin(2 * h.x[3])
        cos2 += h.corrections * math.cos(2 * h.x[3])
    x[3] = (0.5 * math.atan2(sin2, cos2)) % math.pi
    return Hypothesis(
        kind=members[0].kind,
        color=members[0].color,
        x=x,
        P=P,
        corrections=total,
        banned=any(h.banned for h in members),
    )


def _line_diff(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _projection_overlap(c1, h1, l1, c2, h2, l2) -> float:
    """Overlap of segment 2 orthogonally projected onto segment 1's axis."""
    u = np.array([math.cos(h1), math.sin(h1)])
    s1 = float(np.asarray(c1) @ u)
    s2 = float(np.asarray(c2) @ u)
    lo = max(s1 - l1 / 2, s2 - l2 / 2)
    hi = min(s1 + l1 / 2, s2 + l2 / 2)
    return max(0.0, hi - lo)
