"""Wall, brick, and placing-spot detectors over synthetic RGB-D frames.

Wall detection thresholds a block-reduced depth image at a height above the
estimated ground plane, pairs near-parallel contour lines separated by the
wall width, and validates pairs with a minimum-area-rectangle test. Brick
detection finds the white ferromagnetic plate in HSV space, back-projects its
contour onto the brick-top plane, and classifies the surrounding body color.
Partially visible plates are recovered from their U- or L-shaped outlines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .arena import BRICK_SPECS, BrickColor, BrickSpec
from .geometry import (CameraIntrinsics, Pose, camera_origin, ray_grid,
                       sensor_to_world, wrap_angle)
from .imgproc import (
    BinaryImage,
    ColorImage,
    DegenerateInputError,
    DepthImage,
    InsufficientPixelsError,
    Segment,
    altitude_histogram_estimate,
    approx_polyline,
    block_min_reduce,
    find_contours,
    min_area_rect,
    morph_close,
    morph_dilate,
    morph_erode,
    rgb_to_hsv,
    threshold_band,
    white_mask,
)

# HSV segmentation ranges (hue 0..180, saturation/value 0..255).
HSV_WHITE = ((0, 0, 180), (180, 60, 255))
HSV_RED1 = ((0, 70, 80), (8, 255, 255))
HSV_RED2 = ((160, 70, 80), (180, 255, 255))
HSV_GREEN = ((44, 60, 60), (80, 255, 255))
HSV_BLUE = ((80, 60, 60), (130, 255, 255))

PLATE_SIZE = (0.20, 0.14)


@dataclass
class PerceptionParams:
    reduce_block: int = 8
    wall_threshold: float = 1.0
    brick_threshold: float = 0.15
    close_kernel: int = 3
    erode_kernel: int = 3
    polyline_tol_px: float = 1.5
    parallel_cross_max: float = 0.15
    wall_width_range: tuple = (0.25, 0.40)
    wall_width_tol: float = 0.10
    rect_length_factor: float = 0.8
    min_line_length: float = 0.5
    min_contour_points: int = 8
    histogram_min_count: int = 1000
    histogram_bin: float = 0.1
    rangefinder_fuse_above: float = 3.5
    rangefinder_gate: float = 2.0
    plate_size: tuple = PLATE_SIZE
    plate_tol: float = 0.25
    partial_plate_max_alt: float = 1.5
    min_plate_pixels: int = 8
    ring_kernel: int = 5  # 2-pixel dilation band
    ring_min_votes: int = 10
    fusion_gate: float = 0.3
    layer_bands: tuple = ((1.0, 1.8), (1.2, 2.0))
    spot_min_points: int = 6


@dataclass
class WallDetection:
    center: np.ndarray  # (2,) world
    heading: float      # undirected, [0, pi)
    length: float
    z: float            # estimated top height above ground
    weight: float = 1.0


@dataclass
class BrickDetection:
    color: Optional[BrickColor]
    center: np.ndarray  # (2,) world
    heading: float      # undirected, [0, pi)
    weight: float       # 1 full contour, 0.5 three edges, 0.25 two edges
    source: str         # color | depth | fused
    z: float = 0.2


@dataclass
class PlacingSpot:
    release_xy: np.ndarray  # (2,) world
    wall_heading: float
    leftmost_edge: np.ndarray  # (2,) world
    surface_z: float


class SpotStatus(str, Enum):
    OK = "ok"
    WALL_NOT_VISIBLE = "wall_not_visible"
    EDGE_NOT_VISIBLE = "edge_not_visible"
    NO_SPACE = "no_space"


@dataclass
class PlacingSpotResult:
    status: SpotStatus
    spot: Optional[PlacingSpot] = None


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _line_mean_angle(angles, weights=None) -> float:
    """Weighted mean of undirected line orientations, result in [0, pi)."""
    a = np.asarray(angles, dtype=float)
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=float)
    s = np.sum(w * np.sin(2 * a))
    c = np.sum(w * np.cos(2 * a))
    return (0.5 * math.atan2(s, c)) % math.pi


def estimate_uav_altitude(
    reduced: DepthImage,
    K_red: CameraIntrinsics,
    heading: float,
    params: PerceptionParams,
    rangefinder: Optional[float] = None,
    extra_mask: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Ground-plane distance from the reduced depth grid.

    Returns (altitude, per-pixel vertical drop grid). The histogram estimate
    is primary; the rangefinder only overrides it when the two disagree
    wildly at long range, where depth accuracy degrades.
    """
    R = sensor_to_world(heading)
    xs, ys = ray_grid(K_red)
    dz = R[2, 0] * xs[None, :] + R[2, 1] * ys[:, None] + R[2, 2]
    d = reduced.samples.astype(np.float64)
    drops = np.where(d > 0, -dz * d, 0.0)
    sample = drops if extra_mask is None else np.where(extra_mask, drops, 0.0)
    alt = altitude_histogram_estimate(
        sample, min_count=params.histogram_min_count, bin_width=params.histogram_bin
    )
    if (
        rangefinder is not None
        and alt > params.rangefinder_fuse_above
        and abs(alt - rangefinder) > params.rangefinder_gate
    ):
        alt = rangefinder
    return alt, drops


def _interior_runs(points: np.ndarray, shape: tuple, extra_ok=None) -> list[np.ndarray]:
    """Split a cyclic contour into maximal runs of non-border points.

    Returns index arrays in trace order. A contour that never touches the
    frame comes back as one run covering every point.
    """
    h, w = shape
    keep = (
        (points[:, 0] > 0) & (points[:, 0] < w - 1)
        & (points[:, 1] > 0) & (points[:, 1] < h - 1)
    )
    if extra_ok is not None:
        keep = keep & extra_ok
    n = len(points)
    if keep.all():
        return [np.arange(n)]
    if not keep.any():
        return []
    first_dropped = int(np.nonzero(~keep)[0][0])
    order = np.concatenate([np.arange(first_dropped, n), np.arange(0, first_dropped)])
    runs: list[list[int]] = []
    cur: list[int] = []
    for i in order:
        if keep[i]:
            cur.append(i)
        elif cur:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    return [np.asarray(r) for r in runs]


def _depth_points_world(points, reduced, K_red, R, origin_xy, drops, altitude):
    """World (x, y) and height-above-ground of reduced-grid pixels."""
    xs, ys = ray_grid(K_red)
    ux = xs[points[:, 0]]
    uy = ys[points[:, 1]]
    d = reduced.samples[points[:, 1], points[:, 0]].astype(np.float64)
    valid = d > 0
    points, ux, uy, d = points[valid], ux[valid], uy[valid], d[valid]
    if len(points) == 0:
        return None
    dxw = R[0, 0] * ux + R[0, 1] * uy + R[0, 2]
    dyw = R[1, 0] * ux + R[1, 1] * uy + R[1, 2]
    wx = origin_xy[0] + d * dxw
    wy = origin_xy[1] + d * dyw
    z = altitude - drops[points[:, 1], points[:, 0]]
    return np.column_stack([wx, wy]), z


def detect_walls(
    depth: DepthImage,
    K: CameraIntrinsics,
    pose: Pose,
    params: PerceptionParams,
    rangefinder: Optional[float] = None,
) -> list[WallDetection]:
    """Elevated-structure detector: reduce, threshold above the ground plane,
    trace contours, fit lines, and pair parallel lines one wall-width apart."""
    reduced = block_min_reduce(depth, params.reduce_block)
    K_red = K.scaled(params.reduce_block)
    try:
        altitude, drops = estimate_uav_altitude(
            reduced, K_red, pose.heading, params, rangefinder
        )
    except InsufficientPixelsError:
        return []
    alts = altitude - drops
    thr = threshold_band(reduced, alts, params.wall_threshold, float("inf"))
    closed = morph_close(thr, params.close_kernel)
    R = sensor_to_world(pose.heading)
    cam_xy = camera_origin(pose)[:2]
    m_per_px = altitude / K_red.fx
    lines: list[tuple[Segment, float]] = []
    for contour in find_contours(closed):
        if len(contour.points) < params.min_contour_points:
            continue
        # Points added by the closing carry unrelated (ground) depth samples;
        # only pixels that passed the threshold themselves anchor the lines.
        measured = thr.mask[contour.points[:, 1], contour.points[:, 0]]
        runs = _interior_runs(contour.points, reduced.samples.shape, extra_ok=measured)
        whole = len(runs) == 1 and len(runs[0]) == len(contour.points)
        for run in runs:
            got = _depth_points_world(
                contour.points[run], reduced, K_red, R, cam_xy, drops, altitude
            )
            if got is None or len(got[0]) < params.min_contour_points:
                continue
            world_pts, z_pts = got
            mean_z = float(np.mean(z_pts))
            segs = approx_polyline(
                world_pts, params.polyline_tol_px * m_per_px,
                closed=contour.closed and whole,
            )
            for s in segs:
                if s.length >= params.min_line_length:
                    lines.append((s, mean_z))
    detections: list[WallDetection] = []
    lo = params.wall_width_range[0] - params.wall_width_tol
    hi = params.wall_width_range[1] + params.wall_width_tol
    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            s1, z1 = lines[i]
            s2, z2 = lines[j]
            cross = abs(_cross2(s1.direction, s2.direction))
            if cross >= params.parallel_cross_max:
                continue
            corners = np.array([s1.p0, s1.p1, s2.p0, s2.p1])
            try:
                rect = min_area_rect(corners)
            except DegenerateInputError:
                continue
            if rect.length >= params.rect_length_factor * (s1.length + s2.length):
                continue
            if not (lo <= rect.width <= hi):
                continue
            det = WallDetection(
                center=rect.center,
                heading=rect.angle,
                length=rect.length,
                z=0.5 * (z1 + z2),
                weight=1.0,
            )
            if not any(
                np.linalg.norm(det.center - d.center) < 0.3
                and _line_diff(det.heading, d.heading) < 0.2
                for d in detections
            ):
                detections.append(det)
    return _merge_collinear(detections)


def _merge_collinear(dets: list[WallDetection]) -> list[WallDetection]:
    """Join fragments of one wall: collinear detections with small lateral
    offset and a small axial gap become a single longer detection."""
    dets = list(dets)
    merged = True
    while merged and len(dets) > 1:
        merged = False
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                a, b = dets[i], dets[j]
                if _line_diff(a.heading, b.heading) > 0.2:
                    continue
                ang = _line_mean_angle([a.heading, b.heading], [a.length, b.length])
                u = np.array([math.cos(ang), math.sin(ang)])
                n = np.array([-u[1], u[0]])
                lateral = abs(float((b.center - a.center) @ n))
                if lateral > 0.25:
                    continue
                sa = float(a.center @ u)
                sb = float(b.center @ u)
                gap = abs(sa - sb) - (a.length + b.length) / 2.0
                if gap > 0.5:
                    continue
                lo = min(sa - a.length / 2, sb - b.length / 2)
                hi = max(sa + a.length / 2, sb + b.length / 2)
                w = a.length + b.length
                mid_lat = (a.length * float(a.center @ n) + b.length * float(b.center @ n)) / w
                center = u * (0.5 * (lo + hi)) + n * mid_lat
                dets[i] = WallDetection(
                    center=center,
                    heading=ang,
                    length=hi - lo,
                    z=(a.length * a.z + b.length * b.z) / w,
                    weight=1.0,
                )
                dets.pop(j)
                merged = True
                break
            if merged:
                break
    return dets


def _line_diff(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


# ------------------------------------------------------------------ color

_COLOR_RANGES = {
    BrickColor.RED: (HSV_RED1, HSV_RED2),
    BrickColor.GREEN: (HSV_GREEN,),
    BrickColor.BLUE: (HSV_BLUE,),
}


def _classify_ring(color_img, blob_mask, bbox, params) -> Optional[BrickColor]:
    """Majority brick-color vote in a thin band around the plate blob."""
    x0, x1, y0, y1 = bbox
    pad = params.ring_kernel
    x0 = max(0, x0 - pad)
    y0 = max(0, y0 - pad)
    x1 = min(color_img.width, x1 + pad)
    y1 = min(color_img.height, y1 + pad)
    window = BinaryImage(blob_mask[y0:y1, x0:x1])
    band = morph_dilate(window, params.ring_kernel).mask & ~window.mask
    if not band.any():
        return None
    hsv = rgb_to_hsv(ColorImage(color_img.rgb[y0:y1, x0:x1]))
    h = hsv[..., 0][band]
    s = hsv[..., 1][band]
    v = hsv[..., 2][band]
    red = ((h <= 8) | (h >= 160)) & (s >= 70) & (v >= 80)
    green = (h >= 44) & (h <= 80) & (s >= 60) & (v >= 60)
    blue = (h >= 80) & (h <= 130) & (s >= 60) & (v >= 60)
    votes = {
        BrickColor.RED: int(np.count_nonzero(red)),
        BrickColor.GREEN: int(np.count_nonzero(green)),
        BrickColor.BLUE: int(np.count_nonzero(blue)),
    }
    best = max(votes, key=lambda c: votes[c])
    if votes[best] < params.ring_min_votes:
        return None
    return best


def _recover_partial_rect(segments: list[Segment], dims: tuple,
                          tol: float) -> Optional[tuple]:
    """Center/heading/weight of a rectangle seen as a U (3 edges) or L (2).

    `segments` follow the outline from image border to image border; `dims`
    is the (length, width) of the expected rectangle.
    """
    long_dim, short_dim = max(dims), min(dims)
    segs = [s for s in segments if s.length > 0.02]
    if len(segs) >= 3:
        # U shape: first and last are the arms, the middle span is the base.
        a, c = segs[0], segs[-1]
        base_candidates = segs[1:-1]
        b = max(base_candidates, key=lambda s: s.length)
        if abs(_cross2(a.direction, c.direction)) > 0.3:
            return None
        if abs(float(np.dot(a.direction, b.direction))) > 0.5:
            return None
        # Separation of the two arm lines gives the across-axis dimension.
        sep = _point_line_distance(c.midpoint, a.p0, a.p1)
        if abs(sep - long_dim) < abs(sep - short_dim):
            across, along = long_dim, short_dim
        else:
            across, along = short_dim, long_dim
        if abs(sep - across) > tol * across:
            return None
        base_mid = b.midpoint
        open_mid = 0.5 * (a.p0 + c.p1)
        u = open_mid - base_mid
        norm = np.linalg.norm(u)
        if norm < 1e-9:
            return None
        u = u / norm
        center = base_mid + u * (along / 2.0)
        axis = math.atan2(u[1], u[0])
        heading = axis if along == long_dim else axis + math.pi / 2
        return center, heading % math.pi, 0.5
    if len(segs) == 2:
        # L shape: two perpendicular edges sharing the corner.
        a, b = segs
        if abs(float(np.dot(a.direction, b.direction))) > 0.5:
            return None
        corner = 0.5 * (a.p1 + b.p0)
        u0 = -a.direction
        u1 = b.direction
        if a.length >= b.length:
            d0, d1 = long_dim, short_dim
        else:
            d0, d1 = short_dim, long_dim
        center = corner + u0 * (d0 / 2.0) + u1 * (d1 / 2.0)
        arm = u0 if d0 == long_dim else u1
        heading = math.atan2(arm[1], arm[0]) % math.pi
        return center, heading, 0.25
    return None


def _point_line_distance(p, a, b) -> float:
    d = b - a
    n = np.hypot(*d)
    if n < 1e-12:
        return float(np.linalg.norm(p - a))
    return abs(_cross2(d / n, p - a))


def detect_bricks_color(
    color: ColorImage,
    K: CameraIntrinsics,
    pose: Pose,
    params: PerceptionParams,
    known_color: Optional[BrickColor] = None,
) -> list[BrickDetection]:
    """White-plate detector: segment, close, trace, back-project to the
    brick-top plane, validate plate size, and classify the body color from
    a ring around the plate."""
    brick_h = 0.2
    cam = camera_origin(pose)
    plane_alt = float(cam[2]) - brick_h
    if plane_alt <= 0.15:
        return []
    white = white_mask(color)
    closed = morph_close(white, params.close_kernel)
    contours = find_contours(closed)
    if not contours:
        return []
    R = sensor_to_world(pose.heading)
    xs, ys = ray_grid(K)
    pl, pw = params.plate_size
    tol = params.plate_tol
    out: list[BrickDetection] = []
    for contour in contours:
        pts = contour.points
        if len(pts) < params.min_plate_pixels:
            continue
        ux = xs[pts[:, 0]]
        uy = ys[pts[:, 1]]
        dxw = R[0, 0] * ux + R[0, 1] * uy + R[0, 2]
        dyw = R[1, 0] * ux + R[1, 1] * uy + R[1, 2]
        dzw = R[2, 0] * ux + R[2, 1] * uy + R[2, 2]
        down = dzw < -0.05
        if np.count_nonzero(down) < params.min_plate_pixels:
            continue
        scale = plane_alt / -dzw[down]
        wx = cam[0] + dxw[down] * scale
        wy = cam[1] + dyw[down] * scale
        world_pts = np.column_stack([wx, wy])
        found = None
        if not contour.touches_border:
            try:
                rect = min_area_rect(world_pts)  # hulls internally
            except DegenerateInputError:
                continue
            if abs(rect.length - pl) <= tol * pl and abs(rect.width - pw) <= tol * pw:
                found = (rect.center, rect.angle, 1.0)
        elif plane_alt < params.partial_plate_max_alt:
            runs = _interior_runs(pts, closed.mask.shape, extra_ok=down)
            if not runs:
                continue
            run = max(runs, key=len)
            if len(run) < params.min_plate_pixels:
                continue
            sc = plane_alt / -dzw[run]
            part = np.column_stack(
                [cam[0] + dxw[run] * sc,
                 cam[1] + dyw[run] * sc]
            )
            m_per_px = plane_alt / K.fx
            segs = approx_polyline(part, 2.0 * m_per_px, closed=False)
            found = _recover_partial_rect(segs, (pl, pw), tol)
        if found is None:
            continue
        center, heading, weight = found
        bbox = (int(pts[:, 0].min()), int(pts[:, 0].max()) + 1,
                int(pts[:, 1].min()), int(pts[:, 1].max()) + 1)
        ring = _classify_ring(color, closed.mask, bbox, params)
        if ring is None:
            continue
        out.append(BrickDetection(
            color=ring, center=np.asarray(center, dtype=float),
            heading=heading, weight=weight, source="color", z=brick_h,
        ))
    return out


# ------------------------------------------------------------------ depth

def detect_bricks_depth(
    depth: DepthImage,
    K: CameraIntrinsics,
    pose: Pose,
    params: PerceptionParams,
    known_spec: Optional[BrickSpec] = None,
    rangefinder: Optional[float] = None,
) -> list[BrickDetection]:
    """Brick-footprint detector on the reduced depth grid: same skeleton as
    wall detection with a low threshold and brick-sized rectangle checks."""
    reduced = block_min_reduce(depth, params.reduce_block)
    K_red = K.scaled(params.reduce_block)
    try:
        altitude, drops = estimate_uav_altitude(
            reduced, K_red, pose.heading, params, rangefinder
        )
    except InsufficientPixelsError:
        return []
    alts = altitude - drops
    thr = threshold_band(reduced, alts, params.brick_threshold, 0.45)
    closed = morph_close(thr, params.close_kernel)
    R = sensor_to_world(pose.heading)
    cam_xy = camera_origin(pose)[:2]
    m_per_px = altitude / K_red.fx
    out: list[BrickDetection] = []
    for contour in find_contours(closed):
        if len(contour.points) < params.min_contour_points:
            continue
        measured = thr.mask[contour.points[:, 1], contour.points[:, 0]]
        runs = _interior_runs(contour.points, reduced.samples.shape, extra_ok=measured)
        if not runs:
            continue
        whole = len(runs) == 1 and len(runs[0]) == len(contour.points)
        run = max(runs, key=len)
        got = _depth_points_world(
            contour.points[run], reduced, K_red, R, cam_xy, drops, altitude
        )
        if got is None or len(got[0]) < params.min_contour_points:
            continue
        world_pts, z_pts = got
        z_mean = float(np.mean(z_pts))
        if contour.closed and whole:
            try:
                rect = min_area_rect(world_pts)
            except DegenerateInputError:
                continue
            spec = _match_footprint(rect.length, rect.width, params)
            if spec is None:
                continue
            out.append(BrickDetection(
                color=spec.color, center=rect.center, heading=rect.angle,
                weight=1.0, source="depth", z=z_mean,
            ))
        elif known_spec is not None:
            segs = approx_polyline(
                world_pts, params.polyline_tol_px * m_per_px, closed=False
            )
            found = _recover_partial_rect(
                segs, (known_spec.length, known_spec.width), params.plate_tol
            )
            if found is None:
                continue
            center, heading, weight = found
            out.append(BrickDetection(
                color=known_spec.color, center=np.asarray(center, dtype=float),
                heading=heading, weight=weight, source="depth", z=z_mean,
            ))
    return out


def _match_footprint(length, width, params) -> Optional[BrickSpec]:
    best = None
    for spec in BRICK_SPECS.values():
        if abs(width - spec.width) > 0.12:
            continue
        err = abs(length - spec.length)
        if err <= max(0.08, 0.25 * spec.length):
            if best is None or err < best[0]:
                best = (err, spec)
    return best[1] if best else None


# ------------------------------------------------------------------ fusion

def fuse_detections(
    color_dets: list[BrickDetection],
    depth_dets: list[BrickDetection],
    gate: float = 0.3,
) -> list[BrickDetection]:
    """Nearest-neighbor association and weight-weighted averaging."""
    used_c = [False] * len(color_dets)
    used_d = [False] * len(depth_dets)
    pairs = []
    dists = []
    for i, c in enumerate(color_dets):
        for j, d in enumerate(depth_dets):
            dist = float(np.linalg.norm(c.center - d.center))
            if dist < gate:
                dists.append((dist, i, j))
    out: list[BrickDetection] = []
    for dist, i, j in sorted(dists):
        if used_c[i] or used_d[j]:
            continue
        used_c[i] = used_d[j] = True
        c, d = color_dets[i], depth_dets[j]
        w = c.weight + d.weight
        center = (c.weight * c.center + d.weight * d.center) / w
        heading = _line_mean_angle([c.heading, d.heading], [c.weight, d.weight])
        z = (c.weight * c.z + d.weight * d.z) / w
        out.append(BrickDetection(
            color=c.color or d.color, center=center, heading=heading,
            weight=max(c.weight, d.weight), source="fused", z=z,
        ))
    out.extend(c for i, c in enumerate(color_dets) if not used_c[i])
    out.extend(d for j, d in enumerate(depth_dets) if not used_d[j])
    return out


# ------------------------------------------------------------------ placing

def build_carry_mask(reduced: DepthImage, near_limit: float = 0.5) -> BinaryImage:
    """Usable-pixel mask from the frame captured right after grasping.

    The carried brick (and landing gear) shows up as very close returns;
    those pixels, dilated by two, are frozen out for the rest of the flight.
    """
    near = (reduced.samples > 0) & (reduced.samples < near_limit)
    blocked = morph_dilate(BinaryImage(near), 5).mask
    return BinaryImage(~blocked)


def detect_placing_spot(
    depth: DepthImage,
    K: CameraIntrinsics,
    pose: Pose,
    params: PerceptionParams,
    brick: BrickSpec,
    layer: int,
    mask: Optional[BinaryImage],
    wall_direction: np.ndarray,
    rangefinder: Optional[float] = None,
) -> PlacingSpotResult:
    """Free-wall detector: masked band threshold at the layer height, close,
    erode away the transparent wing artifacts, and take the free end point
    along the wall axis ("leftmost" in the approach view)."""
    reduced = block_min_reduce(depth, params.reduce_block)
    K_red = K.scaled(params.reduce_block)
    keep = None if mask is None else mask.mask
    if keep is not None and keep.shape != reduced.samples.shape:
        raise ValueError("mask shape does not match the reduced image")
    try:
        altitude, drops = estimate_uav_altitude(
            reduced, K_red, pose.heading, params, rangefinder, extra_mask=keep
        )
    except InsufficientPixelsError:
        return PlacingSpotResult(SpotStatus.WALL_NOT_VISIBLE)
    alts = altitude - drops
    lo, hi = params.layer_bands[layer]
    thr = threshold_band(reduced, alts, lo, hi)
    if keep is not None:
        thr = BinaryImage(thr.mask & keep)
    cleaned = morph_erode(morph_close(thr, params.close_kernel), params.erode_kernel)
    contours = find_contours(BinaryImage(cleaned.mask))
    contours = [c for c in contours if len(c.points) >= params.spot_min_points]
    if not contours:
        return PlacingSpotResult(SpotStatus.WALL_NOT_VISIBLE)
    # The carried brick occludes the wall right under the camera, so the free
    # wall often shows as several fragments; the search spans all of them.
    pts = np.concatenate([c.points for c in contours])
    xs, ys = ray_grid(K_red)
    R = sensor_to_world(pose.heading)
    ux = xs[pts[:, 0]]
    uy = ys[pts[:, 1]]
    d = reduced.samples[pts[:, 1], pts[:, 0]].astype(np.float64)
    # Keep only pixels with their own in-band measurement; morphology can
    # promote pixels whose samples belong to the ground far below.
    valid = (d > 0) & thr.mask[pts[:, 1], pts[:, 0]]
    pts, ux, uy, d = pts[valid], ux[valid], uy[valid], d[valid]
    if len(pts) < params.spot_min_points:
        return PlacingSpotResult(SpotStatus.WALL_NOT_VISIBLE)
    cam_xy = camera_origin(pose)[:2]
    wx = cam_xy[0] + d * (R[0, 0] * ux + R[0, 1] * uy + R[0, 2])
    wy = cam_xy[1] + d * (R[1, 0] * ux + R[1, 1] * uy + R[1, 2])
    world_pts = np.column_stack([wx, wy])
    z_pts = altitude - drops[pts[:, 1], pts[:, 0]]
    axis = np.asarray(wall_direction, dtype=float)
    axis = axis / np.linalg.norm(axis)
    # The vertical faces of the wall pass the altitude band too; only pixels
    # near the top surface locate the free area.
    top = float(np.percentile(z_pts, 90))
    near_top = z_pts >= top - 0.3
    pts, world_pts, z_pts = pts[near_top], world_pts[near_top], z_pts[near_top]
    if len(pts) < params.spot_min_points:
        return PlacingSpotResult(SpotStatus.WALL_NOT_VISIBLE)
    # Fragments of one wall share a lateral line; drop stray structures.
    lat = world_pts @ np.array([-axis[1], axis[0]])
    near_line = np.abs(lat - float(np.median(lat))) <= 0.6
    pts, world_pts, z_pts = pts[near_line], world_pts[near_line], z_pts[near_line]
    if len(pts) < params.spot_min_points:
        return PlacingSpotResult(SpotStatus.WALL_NOT_VISIBLE)
    proj = world_pts @ axis
    s_min = float(proj.min())
    s_max = float(proj.max())
    m_per_px = altitude / K_red.fx
    near_edge = proj <= s_min + 1.5 * m_per_px
    h_img, w_img = reduced.samples.shape
    # The erosion shaves one pixel off every side, so "on the border" for the
    # eroded blob means within one kernel radius of the frame.
    margin = params.erode_kernel // 2 + 1
    edge_px = pts[near_edge]
    on_border = (
        (edge_px[:, 0] <= margin) | (edge_px[:, 0] >= w_img - 1 - margin)
        | (edge_px[:, 1] <= margin) | (edge_px[:, 1] >= h_img - 1 - margin)
    )
    if on_border.any():
        return PlacingSpotResult(SpotStatus.EDGE_NOT_VISIBLE)
    if s_max - s_min < brick.length:
        return PlacingSpotResult(SpotStatus.NO_SPACE)
    # Anchor laterally on the blob centerline; erosion pulled the free end
    # inward by about one pixel, compensated along the axis.
    normal = np.array([-axis[1], axis[0]])
    lat_center = float(np.median(world_pts @ normal))
    edge_s = float(proj[near_edge].mean()) - m_per_px
    edge_xy = axis * edge_s + normal * lat_center
    release = edge_xy + axis * (brick.length / 2.0)
    surface = float(np.mean(z_pts))
    heading = math.atan2(axis[1], axis[0]) % math.pi
    return PlacingSpotResult(
        SpotStatus.OK,
        PlacingSpot(release_xy=release, wall_heading=heading,
                    leftmost_edge=edge_xy, surface_z=surface),
    )
