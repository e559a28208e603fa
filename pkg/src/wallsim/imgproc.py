"""From-scratch raster primitives for the detection pipelines.

Block reduction, thresholding, 3x3-style morphology, outer-contour tracing,
polyline simplification, convex hull, minimum-area rectangle, HSV conversion
and range tests, plus the distance-histogram height estimator. Everything
operates on plain numpy buffers; no OpenCV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when a geometric operation receives too few / collinear points."""


class InsufficientPixelsError(ValueError):
    """Raised when an estimator has fewer valid pixels than it requires."""


@dataclass
class DepthImage:
    """Row-major grid of z-depth samples in meters; 0 marks an invalid pixel."""

    samples: np.ndarray  # (H, W) float32

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or 0 in self.samples.shape:
            raise ValueError("depth image must be a non-empty 2-D array")

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass
class ColorImage:
    rgb: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("color image must be (H, W, 3)")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class BinaryImage:
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or 0 in self.mask.shape:
            raise ValueError("binary image must be a non-empty 2-D array")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


@dataclass
class Contour:
    """Outer boundary of one 8-connected foreground component.

    Points are (x, y) pixel coordinates in trace order, counterclockwise
    when the y axis is interpreted as pointing up.
    """

    points: np.ndarray  # (N, 2) int
    closed: bool
    touches_border: bool


@dataclass
class Segment:
    p0: np.ndarray  # (2,)
    p1: np.ndarray  # (2,)

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.p1 - self.p0)))

    @property
    def direction(self) -> np.ndarray:
        d = self.p1 - self.p0
        n = np.hypot(*d)
        return d / n if n > 0 else np.array([1.0, 0.0])

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p0 + self.p1)

    @property
    def angle(self) -> float:
        d = self.direction
        return math.atan2(d[1], d[0])


@dataclass
class RotatedRect:
    center: np.ndarray  # (2,)
    length: float       # long side
    width: float        # short side
    angle: float        # orientation of the long side, in [0, pi)

    @property
    def area(self) -> float:
        return self.length * self.width


def block_min_reduce(img: DepthImage, block: int) -> DepthImage:
    """Downsample by taking the minimum valid (>0) sample of each block.

    Blocks with no valid sample become 0. Trailing partial blocks, when the
    block size does not divide the image, are emitted as all-invalid.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    if block == 1:
        return DepthImage(img.samples.copy())
    h, w = img.samples.shape
    bh, bw = h // block, w // block
    oh, ow = math.ceil(h / block), math.ceil(w / block)
    out = np.zeros((oh, ow), dtype=np.float32)
    if bh and bw:
        core = img.samples[: bh * block, : bw * block].reshape(bh, block, bw, block)
        valid = core > 0
        stacked = np.where(valid, core, np.float32(np.inf))
        mins = stacked.min(axis=(1, 3))
        mins[~valid.any(axis=(1, 3))] = 0.0
        out[:bh, :bw] = mins
    return DepthImage(out)


def threshold_altitude(
    img: DepthImage, altitudes: np.ndarray, cutoff: float
) -> BinaryImage:
    """Pixels whose altitude exceeds the cutoff and whose sample is valid."""
    altitudes = np.asarray(altitudes)
    if altitudes.shape != img.samples.shape:
        raise ValueError(
            f"altitude grid {altitudes.shape} does not match image {img.samples.shape}"
        )
    return BinaryImage((altitudes > cutoff) & (img.samples > 0))


def threshold_band(
    img: DepthImage, altitudes: np.ndarray, lo: float, hi: float
) -> BinaryImage:
    altitudes = np.asarray(altitudes)
    if altitudes.shape != img.samples.shape:
        raise ValueError("altitude grid shape mismatch")
    return BinaryImage((altitudes > lo) & (altitudes < hi) & (img.samples > 0))


def _check_kernel(kernel: int):
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be an odd positive size")


def morph_dilate(img: BinaryImage, kernel: int = 3) -> BinaryImage:
    """Binary dilation with a square structuring element; outside is clear."""
    _check_kernel(kernel)
    r = kernel // 2
    if r == 0:
        return BinaryImage(img.mask.copy())
    m = img.mask
    out = np.zeros_like(m)
    h, w = m.shape
    for dy in range(-r, r + 1):
        ys = slice(max(0, dy), min(h, h + dy))
        yd = slice(max(0, -dy), min(h, h - dy))
        for dx in range(-r, r + 1):
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            np.logical_or(out[yd, xd], m[ys, xs], out=out[yd, xd])
    return BinaryImage(out)


def morph_erode(img: BinaryImage, kernel: int = 3) -> BinaryImage:
    """Binary erosion with a square structuring element; outside counts as set,
    so foreground touching the border does not erode from that side."""
    _check_kernel(kernel)
    r = kernel // 2
    if r == 0:
        return BinaryImage(img.mask.copy())
    m = img.mask
    out = np.ones_like(m)
    h, w = m.shape
    for dy in range(-r, r + 1):
        ys = slice(max(0, dy), min(h, h + dy))
        yd = slice(max(0, -dy), min(h, h - dy))
        for dx in range(-r, r + 1):
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            np.logical_and(out[yd, xd], m[ys, xs], out=out[yd, xd])
    return BinaryImage(out)


def morph_close(img: BinaryImage, kernel: int = 3) -> BinaryImage:
    """Dilation followed by erosion; fills gaps up to the kernel size."""
    return morph_erode(morph_dilate(img, kernel), kernel)


# Moore neighborhood in clockwise order starting west: (dy, dx).
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def _trace_boundary(mask: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbor boundary trace from `start`, whose west neighbor is clear."""
    sy, sx = start
    # Find the first foreground neighbor clockwise from west.
    first_dir = None
    for k in range(8):
        dy, dx = _MOORE[k]
        if mask[sy + dy, sx + dx]:
            first_dir = k
            break
    if first_dir is None:
        return [start]  # isolated pixel
    points = [start]
    cur = (sy + _MOORE[first_dir][0], sx + _MOORE[first_dir][1])
    # Direction we moved to reach `cur`; backtrack points the opposite way.
    move_dir = first_dir
    stop = (start, cur)
    while True:
        points.append(cur)
        search = (move_dir + 4 + 1) % 8  # one past the backtrack direction
        nxt = None
        for k in range(8):
            d = (search + k) % 8
            dy, dx = _MOORE[d]
            cand = (cur[0] + dy, cur[1] + dx)
            if mask[cand]:
                nxt = cand
                move_dir = d
                break
        if nxt is None:
            break  # isolated after all (cannot happen past the first step)
        if (cur, nxt) == stop:
            break
        cur = nxt
    if len(points) > 1 and points[-1] == points[0]:
        points.pop()
    return points


def find_contours(img: BinaryImage) -> list[Contour]:
    """One outer contour per 8-connected foreground component.

    Hole (inner) boundaries are traced to keep the bookkeeping consistent but
    are not returned. Contours carry `touches_border` when any of their points
    lies on the image frame.
    """
    h, w = img.mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = img.mask
    # Start pixels: foreground whose west neighbor is background, in scan order.
    starts = padded[:, 1:] & ~padded[:, :-1]
    ys, xs = np.nonzero(starts)
    visited = np.zeros_like(padded)
    contours = []
    # Re-sort to row-major scan order (nonzero already row-major).
    for sy, sx in zip(ys.tolist(), (xs + 1).tolist()):
        if visited[sy, sx]:
            continue
        pts = _trace_boundary(padded, (sy, sx))
        arr = np.array([(x - 1, y - 1) for y, x in pts], dtype=np.int32)
        for py, px in pts:
            visited[py, px] = True
        if len(pts) >= 3:
            # Outer boundaries trace with nonnegative shoelace area here
            # (counterclockwise once the y axis is flipped to point up);
            # hole boundaries come out negative.
            x = arr[:, 0].astype(np.int64)
            y = arr[:, 1].astype(np.int64)
            area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
            if area2 < 0:
                continue  # hole boundary: traced, not emitted
        touches = bool(
            (arr[:, 0] == 0).any()
            or (arr[:, 1] == 0).any()
            or (arr[:, 0] == w - 1).any()
            or (arr[:, 1] == h - 1).any()
        )
        contours.append(Contour(points=arr, closed=len(pts) >= 3, touches_border=touches))
    return contours


def _point_segment_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.hypot(pts[:, 0] - a[0], pts[:, 1] - a[1])
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])


def _douglas_peucker(pts: np.ndarray, tol: float) -> list[int]:
    """Indices of the kept vertices of an open polyline."""
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[n - 1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _point_segment_dist(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tol:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return list(np.nonzero(keep)[0])


def approx_polyline(points: np.ndarray, tol: float, closed: bool) -> list[Segment]:
    """Farthest-point (Douglas-Peucker) simplification into line segments.

    Every input point lies within `tol` of the simplified polyline. Closed
    inputs are split at two mutually distant anchor points first.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return []
    if not closed:
        idx = _douglas_peucker(pts, tol)
        verts = pts[idx]
        return [Segment(verts[i], verts[i + 1]) for i in range(len(verts) - 1)]
    # Anchor the split at an approximate diameter of the loop.
    d0 = np.hypot(pts[:, 0] - pts[0, 0], pts[:, 1] - pts[0, 1])
    i0 = int(np.argmax(d0))
    d1 = np.hypot(pts[:, 0] - pts[i0, 0], pts[:, 1] - pts[i0, 1])
    i1 = int(np.argmax(d1))
    a, b = sorted((i0, i1))
    first = pts[a : b + 1]
    second = np.concatenate([pts[b:], pts[: a + 1]])
    verts: list[np.ndarray] = []
    for part in (first, second):
        if len(part) >= 2:
            idx = _douglas_peucker(part, tol)
            for k in idx[:-1]:
                verts.append(part[k])
    segments = []
    for i in range(len(verts)):
        p0 = verts[i]
        p1 = verts[(i + 1) % len(verts)]
        if np.hypot(*(p1 - p0)) > 1e-12:
            segments.append(Segment(p0, p1))
    return segments


def approx_contour(contour: Contour, tol: float) -> list[Segment]:
    return approx_polyline(contour.points.astype(float), tol, closed=contour.closed)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull (monotone chain), counterclockwise, without repeated last point."""
    pts = np.asarray(points, dtype=float)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    pts = pts[keep]
    if len(pts) < 3:
        raise DegenerateInputError("convex hull needs at least 3 distinct points")

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise DegenerateInputError("points are collinear")
    return hull


def min_area_rect(points: np.ndarray) -> RotatedRect:
    """Minimum-area enclosing rectangle via rotating calipers over hull edges."""
    hull = convex_hull(points)
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    best = None
    for theta in np.unique(np.mod(angles, math.pi / 2)):
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, s], [-s, c]])  # rotate by -theta
        r = hull @ rot.T
        mn = r.min(axis=0)
        mx = r.max(axis=0)
        size = mx - mn
        area = size[0] * size[1]
        if best is None or area < best[0]:
            mid = 0.5 * (mn + mx)
            center = rot.T @ mid
            best = (area, center, size, theta)
    _, center, size, theta = best
    if size[0] >= size[1]:
        length, width, ang = size[0], size[1], theta
    else:
        length, width, ang = size[1], size[0], theta + math.pi / 2
    return RotatedRect(center=center, length=float(length), width=float(width),
                       angle=float(ang % math.pi))


def rgb_to_hsv(img: ColorImage) -> np.ndarray:
    """Hexcone HSV with hue halved into [0, 180); S, V in [0, 255]."""
    rgb = img.rgb.astype(np.float32)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    diff = maxc - minc
    safe_diff = np.where(diff == 0, 1.0, diff)
    hue = np.zeros_like(maxc)
    m = (maxc == r) & (diff > 0)
    hue[m] = np.mod((g - b)[m] / safe_diff[m], 6.0)
    m = (maxc == g) & (diff > 0) & (maxc != r)
    hue[m] = (b - r)[m] / safe_diff[m] + 2.0
    m = (maxc == b) & (diff > 0) & (maxc != r) & (maxc != g)
    hue[m] = (r - g)[m] / safe_diff[m] + 4.0
    h = np.mod(np.rint(hue * 30.0), 180.0)  # 60 deg per sextant, halved
    safe_max = np.where(maxc == 0, 1.0, maxc)
    s = np.rint(255.0 * diff / safe_max)
    out = np.stack([h, s, maxc], axis=2)
    return out.astype(np.uint8)


def hsv_to_rgb(hsv: np.ndarray) -> ColorImage:
    h = hsv[..., 0].astype(np.float32) * 2.0
    s = hsv[..., 1].astype(np.float32) / 255.0
    v = hsv[..., 2].astype(np.float32)
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    z = np.zeros_like(c)
    sextant = np.floor(hp).astype(int) % 6
    r = np.choose(sextant, [c, x, z, z, x, c])
    g = np.choose(sextant, [x, c, c, x, z, z])
    b = np.choose(sextant, [z, z, x, c, c, x])
    m = v - c
    rgb = np.stack([r + m, g + m, b + m], axis=2)
    return ColorImage(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


def in_range(hsv: np.ndarray, lo: tuple, hi: tuple) -> BinaryImage:
    """Pixels whose H, S, V all lie within the inclusive [lo, hi] bounds."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    m = np.ones(hsv.shape[:2], dtype=bool)
    for c in range(3):
        m &= (hsv[..., c] >= lo[c]) & (hsv[..., c] <= hi[c])
    return BinaryImage(m)


def white_mask(img: ColorImage, s_max: int = 60, v_min: int = 180) -> BinaryImage:
    """Low-saturation bright pixels; identical to an HSV range test on S and V.

    Integer-only: rint(255*(max-min)/max) <= s_max is equivalent to
    2*255*(max-min) <= (2*s_max + 1)*max for positive max.
    """
    r = img.rgb[..., 0]
    g = img.rgb[..., 1]
    b = img.rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b).astype(np.int32)
    minc = np.minimum(np.minimum(r, g), b).astype(np.int32)
    sat_ok = 510 * (maxc - minc) <= (2 * s_max + 1) * maxc
    return BinaryImage(sat_ok & (maxc >= v_min))


def altitude_histogram_estimate(
    drops: np.ndarray, min_count: int = 1000, bin_width: float = 0.1
) -> float:
    """Height above ground from a histogram of per-pixel vertical drops.

    Returns the upper edge of the deepest bin for which at least `min_count`
    valid pixels measure that deep or deeper, so the ground plane (the most
    distant large surface) wins over smaller elevated structures.
    """
    if min_count <= 0:
        raise ValueError("min_count must be positive")
    vals = np.asarray(drops, dtype=float).ravel()
    vals = vals[np.isfinite(vals) & (vals > 0)]
    if vals.size < min_count:
        raise InsufficientPixelsError(
            f"only {vals.size} valid pixels, need {min_count}"
        )
    nbins = int(np.max(vals) / bin_width) + 1
    counts, _ = np.histogram(vals, bins=nbins, range=(0.0, nbins * bin_width))
    deep_count = np.cumsum(counts[::-1])[::-1]  # pixels at or beyond each bin
    idx = np.nonzero(deep_count >= min_count)[0]
    i = int(idx[-1])
    return (i + 1) * bin_width


def write_pgm(path, gray: np.ndarray, max_value: float | None = None):
    """Binary PGM (P5) writer for debug dumps; floats are scaled to 0..255."""
    arr = np.asarray(gray)
    if arr.dtype != np.uint8:
        mx = float(max_value) if max_value else max(float(arr.max()), 1e-9)
        arr = np.clip(arr / mx * 255.0, 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def write_ppm(path, rgb: np.ndarray):
    """Binary PPM (P6) writer for debug dumps."""
    arr = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())
