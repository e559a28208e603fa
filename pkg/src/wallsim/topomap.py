"""Post-scan arena summary: brick lines per color and the ordered wall chain.

Brick hypotheses are filtered by correction count, split into the two stack
clusters with a two-component GMM, discriminated by PCA width, and cleaned
with an iterative median. Wall hypotheses are clustered and chained into the
four-channel zig-zag by analyzing pairwise line intersections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .arena import BrickColor
from .detmap import Hypothesis, _line_diff


class TopoMapError(ValueError):
    """Raised when the scan data cannot support a usable arena summary."""


@dataclass
class TopoParams:
    brick_min_corrections: int = 6
    wall_min_corrections: int = 2
    gmm_restarts: int = 5
    gmm_iters: int = 100
    gmm_tol: float = 1e-6
    cluster_keep_radius: float = 6.0
    brick_outlier_cut: float = 8.0
    wall_outlier_cut: float = 10.0
    median_tol: float = 0.05
    median_max_iters: int = 10
    wall_cluster_dist: float = 3.0
    wall_cluster_heading: float = 0.5
    intersection_max_dist: float = 6.0
    intersection_min_angle: float = 0.7
    chain_continuity_tol: float = 0.5


@dataclass
class BrickLine:
    color: BrickColor
    p0: np.ndarray  # (2,)
    p1: np.ndarray  # (2,)
    heading: float

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.p0 + self.p1)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def direction(self) -> np.ndarray:
        d = self.p1 - self.p0
        n = np.linalg.norm(d)
        return d / n if n > 0 else np.array([1.0, 0.0])


@dataclass
class TopoChannel:
    id: int
    start: np.ndarray  # (2,)
    end: np.ndarray    # (2,)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def heading(self) -> float:
        d = self.end - self.start
        return math.atan2(d[1], d[0])

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.linalg.norm(d)


@dataclass
class TopoMap:
    channels: list  # four TopoChannel, chained start-to-end
    brick_lines: dict  # BrickColor -> BrickLine
    stack_center: np.ndarray
    stack_heading: float

    def validate(self, tol: float = 0.5):
        if len(self.channels) != 4:
            raise TopoMapError(f"expected 4 channels, have {len(self.channels)}")
        for a, b in zip(self.channels, self.channels[1:]):
            if np.linalg.norm(a.end - b.start) > tol:
                raise TopoMapError("wall chain endpoints do not line up")

    def to_dict(self) -> dict:
        return {
            "channels": [
                {"id": c.id, "start": [float(v) for v in c.start],
                 "end": [float(v) for v in c.end]}
                for c in self.channels
            ],
            "brick_lines": {
                color.value: {
                    "p0": [float(v) for v in line.p0],
                    "p1": [float(v) for v in line.p1],
                    "heading": float(line.heading),
                }
                for color, line in sorted(self.brick_lines.items(),
                                          key=lambda kv: kv[0].value)
            },
            "stack_center": [float(v) for v in self.stack_center],
            "stack_heading": float(self.stack_heading),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TopoMap":
        channels = [
            TopoChannel(id=c["id"], start=np.array(c["start"]),
                        end=np.array(c["end"]))
            for c in d["channels"]
        ]
        lines = {
            BrickColor(k): BrickLine(
                color=BrickColor(k), p0=np.array(v["p0"]), p1=np.array(v["p1"]),
                heading=v["heading"],
            )
            for k, v in d["brick_lines"].items()
        }
        return cls(channels=channels, brick_lines=lines,
                   stack_center=np.array(d["stack_center"]),
                   stack_heading=d["stack_heading"])

    @classmethod
    def from_json(cls, text: str) -> "TopoMap":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------------ statistics

def fit_gmm_two(points: np.ndarray, rng: np.random.Generator,
                restarts: int = 5, iters: int = 100, tol: float = 1e-6):
    """Two-component full-covariance GMM via EM with k-means++ starts.

    Returns (means, covariances, assignments) of the best restart by
    log-likelihood.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 4:
        raise TopoMapError("too few points for two clusters")
    best = None
    for _ in range(restarts):
        means = _kmeanspp(pts, 2, rng)
        covs = [np.cov(pts.T) + np.eye(2) * 1e-4 for _ in range(2)]
        weights = np.array([0.5, 0.5])
        prev_ll = -np.inf
        for _ in range(iters):
            log_p = np.stack(
                [_log_gauss(pts, means[k], covs[k]) + math.log(weights[k])
                 for k in range(2)], axis=1,
            )
            mx = log_p.max(axis=1, keepdims=True)
            lse = mx[:, 0] + np.log(np.exp(log_p - mx).sum(axis=1))
            ll = float(lse.sum())
            resp = np.exp(log_p - lse[:, None])
            nk = resp.sum(axis=0) + 1e-12
            weights = nk / n
            means = (resp.T @ pts) / nk[:, None]
            for k in range(2):
                diff = pts - means[k]
                covs[k] = (resp[:, k][:, None] * diff).T @ diff / nk[k]
                covs[k] += np.eye(2) * 1e-6
            if abs(ll - prev_ll) < tol:
                break
            prev_ll = ll
        if best is None or ll > best[0]:
            best = (ll, means.copy(), [c.copy() for c in covs], resp.copy())
    _, means, covs, resp = best
    return means, covs, resp.argmax(axis=1)


def _kmeanspp(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [pts[rng.integers(len(pts))]]
    while len(centers) < k:
        d2 = np.min(
            [np.sum((pts - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(pts[rng.integers(len(pts))])
            continue
        centers.append(pts[rng.choice(len(pts), p=d2 / total)])
    return np.array(centers)


def _log_gauss(pts, mean, cov):
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    diff = pts - mean
    m = np.einsum("ni,ij,nj->n", diff, inv, diff)
    return -0.5 * (m + logdet + 2 * math.log(2 * math.pi))


def principal_stds(points: np.ndarray) -> np.ndarray:
    """Standard deviations along the two principal axes, descending."""
    pts = np.asarray(points, dtype=float)
    cov = np.cov(pts.T)
    vals = np.linalg.eigvalsh(cov)
    return np.sqrt(np.clip(vals[::-1], 0.0, None))


def iterative_median(points: np.ndarray, cut: float,
                     tol: float = 0.05, max_iters: int = 10):
    """Componentwise median with outlier rejection, run to convergence.

    Returns (median, inlier mask).
    """
    pts = np.asarray(points, dtype=float)
    med = np.median(pts, axis=0)
    mask = np.ones(len(pts), dtype=bool)
    for _ in range(max_iters):
        mask = np.linalg.norm(pts - med, axis=1) <= cut
        if not mask.any():
            return med, mask
        new = np.median(pts[mask], axis=0)
        if np.linalg.norm(new - med) < tol:
            med = new
            break
        med = new
    return med, mask


def circular_median_line(angles: np.ndarray) -> float:
    """Median of undirected line orientations, in [0, pi)."""
    a = np.asarray(angles, dtype=float)
    mean2 = 0.5 * math.atan2(np.sin(2 * a).sum(), np.cos(2 * a).sum())
    devs = np.array([math.remainder(x - mean2, math.pi) for x in a])
    return (mean2 + float(np.median(devs))) % math.pi


# ------------------------------------------------------------------ brick lines

@dataclass
class BrickLinesResult:
    lines: dict
    stack_center: np.ndarray
    stack_heading: float


def build_brick_lines(bricks: list[Hypothesis], params: TopoParams,
                      rng: np.random.Generator) -> BrickLinesResult:
    """Separate the two stacks, pick the wider one, and fit per-color lines."""
    hyps = [h for h in bricks if h.corrections >= params.brick_min_corrections]
    if len(hyps) < 4:
        raise TopoMapError("not enough corrected brick hypotheses")
    pts = np.array([h.xy for h in hyps])
    means, _, labels = fit_gmm_two(pts, rng, params.gmm_restarts,
                                   params.gmm_iters, params.gmm_tol)
    near = np.minimum(
        np.linalg.norm(pts - means[0], axis=1),
        np.linalg.norm(pts - means[1], axis=1),
    ) <= params.cluster_keep_radius
    pts = pts[near]
    labels = labels[near]
    hyps = [h for h, k in zip(hyps, near) if k]
    if not (labels == 0).any() or not (labels == 1).any():
        raise TopoMapError("stack clusters could not be separated")
    widths = []
    for k in (0, 1):
        cluster = pts[labels == k]
        if len(cluster) < 3:
            widths.append(np.array([0.0, 0.0]))
        else:
            widths.append(principal_stds(cluster))
    # The flying-robot stack is the wider one.
    uav_k = int(np.argmax([w[0] for w in widths]))
    cluster_pts = pts[labels == uav_k]
    cluster_hyps = [h for h, k in zip(hyps, labels) if k == uav_k]
    center, inliers = iterative_median(
        cluster_pts, params.brick_outlier_cut,
        params.median_tol, params.median_max_iters,
    )
    kept = [h for h, m in zip(cluster_hyps, inliers) if m]
    if len(kept) < 2:
        raise TopoMapError("stack cluster vanished during outlier rejection")
    heading = circular_median_line(np.array([h.heading for h in kept]))
    axis = np.array([math.cos(heading), math.sin(heading)])
    lines = {}
    for color in (BrickColor.RED, BrickColor.GREEN, BrickColor.BLUE,
                  BrickColor.ORANGE):
        sel = [h for h in kept if h.color == color]
        if not sel:
            continue
        cpts = np.array([h.xy for h in sel])
        mean = cpts.mean(axis=0)
        s = (cpts - mean) @ axis
        lines[color] = BrickLine(
            color=color, p0=mean + axis * float(s.min()),
            p1=mean + axis * float(s.max()), heading=heading,
        )
    if not lines:
        raise TopoMapError("no per-color brick lines survived")
    return BrickLinesResult(lines=lines, stack_center=center,
                            stack_heading=heading)


# ------------------------------------------------------------------ wall chain

def build_wall_chain(walls: list[Hypothesis], params: TopoParams) -> list[TopoChannel]:
    hyps = [h for h in walls if h.corrections >= params.wall_min_corrections]
    if len(hyps) < 4:
        raise TopoMapError("not enough corrected wall hypotheses")
    pts = np.array([h.xy for h in hyps])
    _, inliers = iterative_median(pts, params.wall_outlier_cut,
                                  params.median_tol, params.median_max_iters)
    hyps = [h for h, m in zip(hyps, inliers) if m]
    clusters = _cluster_walls(hyps, params)
    if len(clusters) < 4:
        raise TopoMapError(f"only {len(clusters)} wall clusters found, need 4")
    clusters.sort(key=lambda c: -len(c["members"]))
    clusters = clusters[:4]
    joints = _chain_intersections(clusters, params)
    order, joint_of = _order_chain(clusters, joints)
    # Consecutive joint positions along the chain.
    jpts = [joint_of[(order[i], order[i + 1])] for i in range(3)]
    inner_len = [np.linalg.norm(jpts[1] - jpts[0]), np.linalg.norm(jpts[2] - jpts[1])]
    end_len = float(np.mean(inner_len))
    channels = []
    # End channel 0: from its free end to the first joint.
    c0 = clusters[order[0]]
    u0 = _away_direction(c0, jpts[0])
    channels.append(TopoChannel(id=0, start=jpts[0] + u0 * end_len, end=jpts[0]))
    channels.append(TopoChannel(id=1, start=jpts[0], end=jpts[1]))
    channels.append(TopoChannel(id=2, start=jpts[1], end=jpts[2]))
    c3 = clusters[order[3]]
    u3 = _away_direction(c3, jpts[2])
    channels.append(TopoChannel(id=3, start=jpts[2], end=jpts[2] + u3 * end_len))
    channels = _canonical_direction(channels)
    return channels


def _cluster_walls(hyps: list[Hypothesis], params: TopoParams) -> list[dict]:
    clusters: list[dict] = []
    for h in hyps:
        placed = False
        for c in clusters:
            if (np.linalg.norm(h.xy - c["center"]) <= params.wall_cluster_dist
                    and _line_diff(h.heading, c["heading"]) <= params.wall_cluster_heading):
                c["members"].append(h)
                c["center"] = np.mean([m.xy for m in c["members"]], axis=0)
                c["heading"] = _mean_line_angle([m.heading for m in c["members"]])
                c["length"] = float(np.mean([m.length for m in c["members"]]))
                placed = True
                break
        if not placed:
            clusters.append({
                "members": [h], "center": h.xy.copy(),
                "heading": h.heading, "length": h.length,
            })
    return clusters


def _mean_line_angle(angles) -> float:
    a = np.asarray(angles, dtype=float)
    return (0.5 * math.atan2(np.sin(2 * a).sum(), np.cos(2 * a).sum())) % math.pi


def _line_intersection(c1, h1, c2, h2) -> Optional[np.ndarray]:
    d1 = np.array([math.cos(h1), math.sin(h1)])
    d2 = np.array([math.cos(h2), math.sin(h2)])
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-9:
        return None
    rel = np.asarray(c2) - np.asarray(c1)
    t = (rel[0] * d2[1] - rel[1] * d2[0]) / denom
    return np.asarray(c1) + t * d1


def _chain_intersections(clusters, params) -> dict:
    joints = {}
    for i in range(len(clusters)):
        for j in range(i + 1, len(clusters)):
            a, b = clusters[i], clusters[j]
            if _line_diff(a["heading"], b["heading"]) < params.intersection_min_angle:
                continue
            p = _line_intersection(a["center"], a["heading"],
                                   b["center"], b["heading"])
            if p is None:
                continue
            da = np.linalg.norm(p - a["center"])
            db = np.linalg.norm(p - b["center"])
            if max(da, db) > params.intersection_max_dist:
                continue
            joints[(i, j)] = {"point": p, "cost": float(da + db)}
    return joints


def _order_chain(clusters, joints) -> tuple[list[int], dict]:
    if not joints:
        raise TopoMapError("no usable wall intersections")
    work = dict(joints)

    def degree(i):
        return sum(1 for (a, b) in work if a == i or b == i)

    # Remove the least plausible intersections until some channel has one.
    guard = len(work) + 1
    while guard and not any(degree(i) == 1 for i in range(len(clusters))):
        guard -= 1
        worst = max(work, key=lambda k: work[k]["cost"])
        del work[worst]
        if not work:
            raise TopoMapError("wall intersections do not form a chain")
    firsts = [i for i in range(len(clusters)) if degree(i) == 1]
    if not firsts:
        raise TopoMapError("wall intersections do not form a chain")
    first = firsts[0]
    order = [first]
    joint_of = {}
    current = first
    while len(order) < 4:
        options = [
            (k, v) for k, v in work.items()
            if (k[0] == current or k[1] == current)
            and (k[1] if k[0] == current else k[0]) not in order
        ]
        if not options:
            raise TopoMapError("wall chain broke before reaching four channels")
        key, joint = min(options, key=lambda kv: kv[1]["cost"])
        nxt = key[1] if key[0] == current else key[0]
        joint_of[(current, nxt)] = joint["point"]
        joint_of[(nxt, current)] = joint["point"]
        order.append(nxt)
        current = nxt
    return order, joint_of


def _away_direction(cluster, joint) -> np.ndarray:
    u = np.array([math.cos(cluster["heading"]), math.sin(cluster["heading"])])
    if float((cluster["center"] - joint) @ u) < 0:
        u = -u
    return u


def _canonical_direction(channels: list[TopoChannel]) -> list[TopoChannel]:
    """Orient the chain so its first kink turns counterclockwise.

    The zig-zag's turn signs alternate and flip when traversed backwards,
    which makes the choice invariant under rigid motion of the whole arena.
    """
    d0 = channels[0].direction
    d1 = channels[1].direction
    if d0[0] * d1[1] - d0[1] * d1[0] < 0:
        channels = [
            TopoChannel(id=i, start=c.end.copy(), end=c.start.copy())
            for i, c in enumerate(reversed(channels))
        ]
    for i, c in enumerate(channels):
        c.id = i
    return channels


def build_topomap(brick_hyps, wall_hyps, params: TopoParams,
                  rng: np.random.Generator) -> TopoMap:
    lines = build_brick_lines(brick_hyps, params, rng)
    channels = build_wall_chain(wall_hyps, params)
    topo = TopoMap(channels=channels, brick_lines=lines.lines,
                   stack_center=lines.stack_center,
                   stack_heading=lines.stack_heading)
    topo.validate(params.chain_continuity_tol)
    return topo


# ------------------------------------------------------------------ assignment

@dataclass
class PlanStep:
    color: BrickColor
    channel: int
    layer: int
    slot: int
    release_offset: float       # slot start along the channel axis
    grasp_hint: tuple           # (x, y) where the search for this brick starts

    def to_dict(self) -> dict:
        return {
            "color": self.color.value,
            "channel": self.channel,
            "layer": self.layer,
            "slot": self.slot,
            "release_offset": round(self.release_offset, 6),
            "grasp_hint": [round(float(v), 6) for v in self.grasp_hint],
        }


@dataclass
class UavPlan:
    uav: int
    altitude: float
    steps: list

    def to_dict(self) -> dict:
        return {
            "uav": self.uav,
            "altitude": self.altitude,
            "steps": [s.to_dict() for s in self.steps],
        }


@dataclass
class MissionPlan:
    uavs: list

    def to_dict(self) -> dict:
        return {"uavs": [u.to_dict() for u in self.uavs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


BRICK_LENGTHS = {BrickColor.RED: 0.3, BrickColor.GREEN: 0.6, BrickColor.BLUE: 1.2}
TRANSIT_ALTITUDES = (3.0, 4.0, 5.0)


def assign_tasks(topo: TopoMap, n_uavs: int, patterns: list,
                 altitudes=TRANSIT_ALTITUDES) -> MissionPlan:
    """Deterministic channel/stack split and per-UAV build plans.

    Channels 0-2 are buildable; with two UAVs the middle channel is skipped
    so the active pair works on non-adjacent walls. The stack is split along
    its long axis; the outer crews start at the outer ends and progress
    inward, a middle crew starts at its segment center.
    """
    if not (1 <= n_uavs <= 3):
        raise ValueError("fleet size must be 1..3")
    for ch_pattern in patterns:
        for layer in ch_pattern:
            for name in layer:
                if BrickColor(name) not in BRICK_LENGTHS:
                    raise ValueError(f"pattern color {name} has no assigned line")
    channel_split = {1: [[0, 1, 2]], 2: [[0], [2]], 3: [[0], [1], [2]]}[n_uavs]
    spans = _stack_spans(topo, n_uavs)
    # Optional swap of the outer stack parts to shorten the ferry legs.
    if n_uavs >= 2:
        def total(assignment):
            dist = 0.0
            for uav, span_i in enumerate(assignment):
                ch = topo.channels[channel_split[uav][0]]
                dist += float(np.linalg.norm(ch.center - spans[span_i]["center"]))
            return dist
        identity = list(range(n_uavs))
        swapped = list(identity)
        swapped[0], swapped[-1] = swapped[-1], swapped[0]
        plan_spans = swapped if total(swapped) < total(identity) else identity
    else:
        plan_spans = [0]
    uav_plans = []
    for uav in range(n_uavs):
        span = spans[plan_spans[uav]]
        counters = {c: 0 for c in BRICK_LENGTHS}
        steps = []
        for ch_id in channel_split[uav]:
            pattern = patterns[ch_id]
            for layer, colors in enumerate(pattern):
                offset = 0.0
                for slot, name in enumerate(colors):
                    color = BrickColor(name)
                    hint = _grasp_hint(topo, span, color, counters[color])
                    counters[color] += 1
                    steps.append(PlanStep(
                        color=color, channel=ch_id, layer=layer, slot=slot,
                        release_offset=offset, grasp_hint=hint,
                    ))
                    offset += BRICK_LENGTHS[color]
        uav_plans.append(UavPlan(uav=uav, altitude=altitudes[uav % len(altitudes)],
                                 steps=steps))
    return MissionPlan(uavs=uav_plans)


def _stack_spans(topo: TopoMap, n: int) -> list[dict]:
    """Split the stack into n parts along its axis; outer parts walk inward,
    a middle part walks outward from its center."""
    axis = np.array([math.cos(topo.stack_heading), math.sin(topo.stack_heading)])
    extents = []
    for line in topo.brick_lines.values():
        for p in (line.p0, line.p1):
            extents.append(float((p - topo.stack_center) @ axis))
    lo, hi = min(extents), max(extents)
    edges = np.linspace(lo, hi, n + 1)
    spans = []
    for i in range(n):
        a, b = float(edges[i]), float(edges[i + 1])
        if n == 1:
            mode = "inward_from_low"
        elif i == 0:
            mode = "inward_from_low"
        elif i == n - 1:
            mode = "inward_from_high"
        else:
            mode = "center_out"
        spans.append({
            "lo": a, "hi": b, "mode": mode,
            "center": topo.stack_center + axis * (0.5 * (a + b)),
            "axis": axis,
        })
    return spans


def _grasp_hint(topo: TopoMap, span: dict, color: BrickColor, k: int) -> tuple:
    line = topo.brick_lines.get(color)
    if line is None:
        raise ValueError(f"no mapped line for {color.value}")
    axis = span["axis"]
    step = BRICK_LENGTHS[color] * 1.1
    if span["mode"] == "inward_from_low":
        s = span["lo"] + step * (k + 0.5)
    elif span["mode"] == "inward_from_high":
        s = span["hi"] - step * (k + 0.5)
    else:
        mid = 0.5 * (span["lo"] + span["hi"])
        delta = step * ((k + 1) // 2) * (1 if k % 2 else -1)
        s = mid + delta
    s = float(np.clip(s, span["lo"] + 0.1, span["hi"] - 0.1))
    # Project the along-stack coordinate onto this color's line.
    base = line.center + axis * (s - float((line.center - topo.stack_center) @ axis))
    return (float(base[0]), float(base[1]))
