import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wallsim.imgproc import (
    BinaryImage,
    ColorImage,
    Contour,
    DegenerateInputError,
    DepthImage,
    InsufficientPixelsError,
    altitude_histogram_estimate,
    approx_contour,
    approx_polyline,
    block_min_reduce,
    convex_hull,
    find_contours,
    hsv_to_rgb,
    in_range,
    min_area_rect,
    morph_close,
    morph_dilate,
    morph_erode,
    rgb_to_hsv,
    threshold_altitude,
    white_mask,
    write_pgm,
    write_ppm,
)

# HSV segmentation bounds used throughout (hue range 0..180).
WHITE = ((0, 0, 180), (180, 60, 255))
RED1 = ((0, 70, 80), (8, 255, 255))
RED2 = ((160, 70, 80), (180, 255, 255))
GREEN = ((44, 60, 60), (80, 255, 255))
BLUE = ((80, 60, 60), (130, 255, 255))


# ---------------------------------------------------------------- reduction

def test_block_min_reduce_shape():
    img = DepthImage(np.full((480, 848), 4.5, dtype=np.float32))
    out = block_min_reduce(img, 8)
    assert out.samples.shape == (60, 106)


def test_block_min_reduce_all_invalid_block():
    img = DepthImage(np.zeros((8, 8), dtype=np.float32))
    assert block_min_reduce(img, 8).samples[0, 0] == 0.0


def test_block_min_reduce_min_of_positives():
    block = np.array([[0.0, 4.5], [3.9, 0.0]], dtype=np.float32)
    out = block_min_reduce(DepthImage(block), 2)
    assert out.samples[0, 0] == pytest.approx(3.9)


def test_block_min_reduce_partial_blocks_are_invalid():
    img = DepthImage(np.full((10, 10), 2.0, dtype=np.float32))
    out = block_min_reduce(img, 8)
    assert out.samples.shape == (2, 2)
    assert out.samples[0, 0] == pytest.approx(2.0)
    assert out.samples[0, 1] == 0.0
    assert out.samples[1, 1] == 0.0


@given(st.integers(1, 4), st.integers(1, 30), st.integers(1, 30), st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_block_min_reduce_never_exceeds_block_samples(block, h, w, seed):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 5, size=(h, w)).astype(np.float32)
    data[rng.random((h, w)) < 0.3] = 0.0
    out = block_min_reduce(DepthImage(data), block).samples
    for i in range(h // block):
        for j in range(w // block):
            blk = data[i * block : (i + 1) * block, j * block : (j + 1) * block]
            valid = blk[blk > 0]
            if valid.size:
                assert out[i, j] == pytest.approx(valid.min())
            else:
                assert out[i, j] == 0.0


# ---------------------------------------------------------------- threshold

def test_threshold_flat_ground_clear():
    img = DepthImage(np.full((6, 6), 4.5, dtype=np.float32))
    alts = np.zeros((6, 6))
    out = threshold_altitude(img, alts, 1.0)
    assert not out.mask.any()


def test_threshold_requires_valid_sample():
    img = DepthImage(np.zeros((3, 3), dtype=np.float32))
    alts = np.full((3, 3), 2.0)
    assert not threshold_altitude(img, alts, 1.0).mask.any()


def test_threshold_shape_mismatch():
    img = DepthImage(np.ones((3, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        threshold_altitude(img, np.zeros((2, 2)), 1.0)


# ---------------------------------------------------------------- morphology

def _square(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return BinaryImage(m)


def test_close_fills_single_pixel_hole():
    img = _square(9, 9, 2, 7, 2, 7)
    img.mask[4, 4] = False
    out = morph_close(img, 3)
    assert out.mask[4, 4]


def test_erode_shrinks_square():
    img = _square(9, 9, 2, 7, 2, 7)
    out = morph_erode(img, 3)
    expected = _square(9, 9, 3, 6, 3, 6)
    assert np.array_equal(out.mask, expected.mask)


def test_close_idempotent_example():
    img = _square(9, 9, 2, 7, 2, 7)
    img.mask[4, 4] = False
    once = morph_close(img, 3)
    twice = morph_close(once, 3)
    assert np.array_equal(once.mask, twice.mask)


def test_kernel_validation():
    img = _square(5, 5, 1, 4, 1, 4)
    with pytest.raises(ValueError):
        morph_close(img, 2)


@st.composite
def binary_images(draw):
    h = draw(st.integers(4, 16))
    w = draw(st.integers(4, 16))
    seed = draw(st.integers(0, 10**6))
    rng = np.random.default_rng(seed)
    return BinaryImage(rng.random((h, w)) < draw(st.floats(0.1, 0.9)))


@given(binary_images())
@settings(max_examples=50, deadline=None)
def test_close_extensive_and_idempotent(img):
    closed = morph_close(img, 3)
    assert np.all(closed.mask | ~img.mask)  # output contains input
    again = morph_close(closed, 3)
    assert np.array_equal(closed.mask, again.mask)


@given(binary_images())
@settings(max_examples=50, deadline=None)
def test_erode_anti_extensive(img):
    eroded = morph_erode(img, 3)
    assert np.all(img.mask | ~eroded.mask)  # output within input


# ---------------------------------------------------------------- contours

def _flood_fill_labels(mask):
    """Independent 8-connected component labeling used as an oracle."""
    labels = np.zeros(mask.shape, dtype=int)
    cur = 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x] and labels[y, x] == 0:
                cur += 1
                stack = [(y, x)]
                labels[y, x] = cur
                while stack:
                    cy, cx = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if (
                                0 <= ny < mask.shape[0]
                                and 0 <= nx < mask.shape[1]
                                and mask[ny, nx]
                                and labels[ny, nx] == 0
                            ):
                                labels[ny, nx] = cur
                                stack.append((ny, nx))
    return labels, cur


def test_contour_of_filled_rectangle():
    img = _square(12, 16, 3, 9, 4, 13)
    contours = find_contours(img)
    assert len(contours) == 1
    c = contours[0]
    assert c.closed and not c.touches_border
    pts = {tuple(p) for p in c.points}
    for corner in [(4, 3), (12, 3), (12, 8), (4, 8)]:
        assert corner in pts


def test_contours_empty_image():
    assert find_contours(BinaryImage(np.zeros((5, 5), dtype=bool))) == []


def test_contours_touching_border_flag():
    img = _square(6, 6, 0, 3, 0, 3)
    (c,) = find_contours(img)
    assert c.touches_border


def test_contours_ignore_holes():
    img = _square(12, 12, 2, 10, 2, 10)
    img.mask[5:7, 5:7] = False
    contours = find_contours(img)
    assert len(contours) == 1


@given(binary_images())
@settings(max_examples=50, deadline=None)
def test_contours_partition_by_component(img):
    labels, n = _flood_fill_labels(img.mask)
    contours = find_contours(img)
    assert len(contours) == n
    seen = set()
    for c in contours:
        comp = {labels[y, x] for x, y in c.points}
        assert len(comp) == 1
        lab = comp.pop()
        assert lab not in seen
        seen.add(lab)


def test_two_disjoint_blobs():
    m = np.zeros((10, 20), dtype=bool)
    m[2:5, 2:6] = True
    m[6:9, 12:18] = True
    contours = find_contours(BinaryImage(m))
    assert len(contours) == 2
    labels, _ = _flood_fill_labels(m)
    comps = [{labels[y, x] for x, y in c.points} for c in contours]
    assert all(len(c) == 1 for c in comps)
    assert comps[0] != comps[1]


# ---------------------------------------------------------------- polyline

def test_approx_rectangle_four_segments():
    img = _square(30, 40, 5, 25, 8, 32)
    (c,) = find_contours(img)
    segments = approx_contour(c, 2.0)
    assert len(segments) == 4


def test_approx_collinear_single_segment():
    pts = np.array([[float(i), 2.0 * i] for i in range(10)])
    segs = approx_polyline(pts, 0.5, closed=False)
    assert len(segs) == 1
    np.testing.assert_allclose(segs[0].p0, [0, 0])
    np.testing.assert_allclose(segs[0].p1, [9, 18])


def test_approx_noisy_rectangle():
    rng = np.random.default_rng(7)
    w, h = 30, 18
    pts = []
    for x in range(w):
        pts.append((x, rng.integers(-1, 2)))
    for y in range(h):
        pts.append((w + rng.integers(-1, 2), y))
    for x in range(w, 0, -1):
        pts.append((x, h + rng.integers(-1, 2)))
    for y in range(h, 0, -1):
        pts.append((rng.integers(-1, 2), y))
    pts = np.array(pts, dtype=float)
    tol = 3.0  # comfortably above the +-1 px noise
    segs = approx_polyline(pts, tol, closed=True)
    assert len(segs) == 4
    # every original point within tol of the simplified polyline
    for p in pts:
        d = min(
            np.linalg.norm(p - s.p0)
            if s.length == 0
            else _seg_dist(p, s.p0, s.p1)
            for s in segs
        )
        assert d <= tol + 1e-9


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1)
    return np.linalg.norm(p - (a + t * ab))


def test_approx_tolerance_validation():
    with pytest.raises(ValueError):
        approx_polyline(np.zeros((4, 2)), 0.0, closed=False)


# ---------------------------------------------------------------- hull/rect

def _brute_hull(points):
    """O(n^3) hull membership test: a point is on the hull iff it is not
    strictly inside any triangle of other points."""
    pts = np.unique(np.asarray(points, float), axis=0)
    n = len(pts)
    on_hull = []
    for i in range(n):
        inside = False
        for a in range(n):
            for b in range(a + 1, n):
                for c in range(b + 1, n):
                    if i in (a, b, c):
                        continue
                    if _strictly_inside(pts[i], pts[a], pts[b], pts[c]):
                        inside = True
                        break
                if inside:
                    break
            if inside:
                break
        if not inside:
            on_hull.append(tuple(pts[i]))
    return set(on_hull)


def _strictly_inside(p, a, b, c):
    def cross(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0])

    d1 = cross(a, b, p)
    d2 = cross(b, c, p)
    d3 = cross(c, a, p)
    has_neg = (d1 < 0) or (d2 < 0) or (d3 < 0)
    has_pos = (d1 > 0) or (d2 > 0) or (d3 > 0)
    return not (has_neg and has_pos) and abs(d1) + abs(d2) + abs(d3) > 1e-12


def test_hull_matches_brute_force_small():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pts = rng.normal(size=(rng.integers(4, 15), 2))
        hull = convex_hull(pts)
        brute = _brute_hull(pts)
        assert {tuple(p) for p in hull} == brute


def test_hull_contains_all_points():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(60, 2))
    hull = convex_hull(pts)
    # each input point is inside or on the hull polygon
    for p in pts:
        assert _point_in_convex(p, hull)


def _point_in_convex(p, hull):
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        if cross < -1e-9:
            return False
    return True


def test_hull_degenerate():
    with pytest.raises(DegenerateInputError):
        convex_hull(np.array([[0, 0], [1, 1]]))
    with pytest.raises(DegenerateInputError):
        convex_hull(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))


def test_min_rect_unit_square():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    r = min_area_rect(pts)
    np.testing.assert_allclose(r.center, [0.5, 0.5], atol=1e-12)
    assert r.length == pytest.approx(1.0)
    assert r.width == pytest.approx(1.0)
    assert r.angle % (math.pi / 2) == pytest.approx(0.0, abs=1e-12)


def test_min_rect_rotated_square():
    base = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    a = math.pi / 4
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    r = min_area_rect(base @ R.T)
    assert r.length == pytest.approx(1.0)
    assert r.width == pytest.approx(1.0)
    assert r.angle % (math.pi / 2) == pytest.approx(math.pi / 4, abs=1e-9)


def _sweep_min_area(points, step_deg=0.5):
    pts = np.asarray(points, float)
    best = math.inf
    for deg in np.arange(0.0, 90.0, step_deg):
        t = math.radians(deg)
        c, s = math.cos(t), math.sin(t)
        r = pts @ np.array([[c, -s], [s, c]])
        size = r.max(axis=0) - r.min(axis=0)
        best = min(best, size[0] * size[1])
    return best


def test_min_rect_beats_angle_sweep():
    rng = np.random.default_rng(11)
    for _ in range(10):
        pts = rng.normal(size=(200, 2)) * [3.0, 1.0]
        r = min_area_rect(pts)
        sweep = _sweep_min_area(pts)
        assert r.area <= sweep * (1 + 1e-9)


@given(st.integers(0, 10**6), st.floats(0.0, math.pi))
@settings(max_examples=40, deadline=None)
def test_min_rect_rotation_invariant_area(seed, theta):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(25, 2))
    R = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    a0 = min_area_rect(pts).area
    a1 = min_area_rect(pts @ R.T).area
    assert a1 == pytest.approx(a0, rel=1e-6)


# ---------------------------------------------------------------- color

def _one_px(rgb):
    return ColorImage(np.array([[rgb]], dtype=np.uint8))


def test_rgb_to_hsv_primaries():
    assert tuple(rgb_to_hsv(_one_px((255, 0, 0)))[0, 0]) == (0, 255, 255)
    assert tuple(rgb_to_hsv(_one_px((0, 255, 0)))[0, 0]) == (60, 255, 255)
    assert tuple(rgb_to_hsv(_one_px((0, 0, 255)))[0, 0]) == (120, 255, 255)


def test_in_range_table_rows():
    white_px = np.array([[[90, 30, 200]]], dtype=np.uint8)
    assert in_range(white_px, *WHITE).mask[0, 0]
    red_hue_170 = np.array([[[170, 200, 200]]], dtype=np.uint8)
    assert in_range(red_hue_170, *RED2).mask[0, 0]
    assert not in_range(red_hue_170, *RED1).mask[0, 0]
    not_blue = np.array([[[50, 200, 200]]], dtype=np.uint8)
    assert not in_range(not_blue, *BLUE).mask[0, 0]


def test_in_range_bound_validation():
    hsv = np.zeros((1, 1, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        in_range(hsv, (10, 0, 0), (5, 255, 255))


def test_white_mask_matches_hsv_range():
    rng = np.random.default_rng(0)
    img = ColorImage(rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8))
    via_hsv = in_range(rgb_to_hsv(img), *WHITE).mask
    fast = white_mask(img).mask
    assert np.array_equal(via_hsv, fast)


@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
@settings(max_examples=200, deadline=None)
def test_hsv_round_trip(r, g, b):
    # rgb_to_hsv(hsv_to_rgb(.)) is stable to +-1 per channel on canonical
    # HSV triples (those produced from an actual RGB pixel).
    hsv1 = rgb_to_hsv(_one_px((r, g, b)))
    hsv2 = rgb_to_hsv(hsv_to_rgb(hsv1))
    h1, s1, v1 = hsv1[0, 0].astype(int)
    h2, s2, v2 = hsv2[0, 0].astype(int)
    dh = min(abs(h1 - h2), 180 - abs(h1 - h2))
    assert dh <= 1
    assert abs(s1 - s2) <= 1
    assert abs(v1 - v2) <= 1


# ---------------------------------------------------------------- histogram

def test_histogram_flat_ground():
    drops = np.full(6360, 4.5)
    est = altitude_histogram_estimate(drops, min_count=1000)
    assert abs(est - 4.5) <= 0.1 + 1e-9


def test_histogram_ground_dominates_wall():
    drops = np.concatenate([np.full(4452, 4.5), np.full(1908, 2.8)])
    est = altitude_histogram_estimate(drops, min_count=1000)
    assert abs(est - 4.5) <= 0.1 + 1e-9


def test_histogram_insufficient_pixels():
    with pytest.raises(InsufficientPixelsError):
        altitude_histogram_estimate(np.full(999, 4.5), min_count=1000)


def test_histogram_ignores_invalid():
    drops = np.concatenate([np.full(3000, 3.0), np.zeros(5000)])
    est = altitude_histogram_estimate(drops, min_count=1000)
    assert abs(est - 3.0) <= 0.1 + 1e-9


# ---------------------------------------------------------------- writers

def test_pgm_ppm_writers(tmp_path):
    depth = np.linspace(0, 10, 24, dtype=np.float32).reshape(4, 6)
    p = tmp_path / "d.pgm"
    write_pgm(p, depth, max_value=10.0)
    data = p.read_bytes()
    assert data.startswith(b"P5\n6 4\n255\n")
    assert len(data) == len(b"P5\n6 4\n255\n") + 24

    rgb = np.zeros((2, 3, 3), dtype=np.uint8)
    q = tmp_path / "c.ppm"
    write_ppm(q, rgb)
    assert q.read_bytes().startswith(b"P6\n3 2\n255\n")
