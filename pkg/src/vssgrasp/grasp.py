"""Grasp rectangles: map decoding, peak extraction, rotated-rectangle IoU,
and the angle+overlap success criterion.

A grasp is (center P, jaw width W, angle theta, quality Q); theta lives in
(-pi/2, pi/2] and is pi-periodic (a grasp and its 180-degree rotation are the
same grasp).  Rectangles carry an additional drawing height h_rect (the short
side) used only for rasterization and IoU evaluation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

WIDTH_SCALE = 150.0  # pixels of jaw opening at width-map value 1.0


def normalize_angle(theta: float) -> float:
    """Map an angle to the unique representative in (-pi/2, pi/2]."""
    t = math.fmod(theta, math.pi)
    if t > math.pi / 2:
        t -= math.pi
    elif t <= -math.pi / 2:
        t += math.pi
    return t


def angular_distance(a: float, b: float) -> float:
    """Distance between pi-periodic angles; symmetric, at most pi/2."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


@dataclass
class GraspRect:
    center: tuple[float, float]  # (row, col) pixels
    width: float                 # jaw opening along the grasp axis
    height: float                # rectangle short side (drawing / eval only)
    angle: float                 # radians in (-pi/2, pi/2]
    quality: float = 1.0

    def __post_init__(self):
        self.angle = normalize_angle(self.angle)

    def corners(self) -> np.ndarray:
        """(4, 2) array of (row, col) corners; the first edge p0->p1 runs
        along the jaw axis."""
        r, c = self.center
        u = np.array([math.sin(self.angle), math.cos(self.angle)])
        v = np.array([-math.cos(self.angle), math.sin(self.angle)])
        hw, hh = self.width / 2.0, self.height / 2.0
        p = np.array([r, c])
        return np.stack([p - hw * u - hh * v,
                         p + hw * u - hh * v,
                         p + hw * u + hh * v,
                         p - hw * u + hh * v])


def rect_from_corners(corners: np.ndarray, quality: float = 1.0) -> GraspRect:
    """Rebuild a rectangle from 4 (row, col) corners: center is their mean,
    the angle comes from the first edge, width is that edge's length."""
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape != (4, 2):
        raise ValueError(f"expected 4 corners, got shape {corners.shape}")
    center = corners.mean(axis=0)
    e0 = corners[1] - corners[0]
    e1 = corners[2] - corners[1]
    width = float(np.hypot(*e0))
    height = float(np.hypot(*e1))
    angle = normalize_angle(math.atan2(e0[0], e0[1]))
    return GraspRect((float(center[0]), float(center[1])), width, height,
                     angle, quality)


@dataclass
class GraspMaps:
    """Four aligned rasters describing per-pixel grasps."""

    quality: np.ndarray
    sin2t: np.ndarray
    cos2t: np.ndarray
    width: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.quality, self.sin2t, self.cos2t, self.width)}
        if len(shapes) != 1:
            raise ValueError(f"grasp maps must share one shape, got {shapes}")

    @property
    def shape(self):
        return self.quality.shape


def decode_angle(sin_map: np.ndarray, cos_map: np.ndarray) -> np.ndarray:
    """Per-pixel grasp angle from the doubled-angle encoding.

    theta = atan2(sin 2t, cos 2t) / 2 covers the full (-pi/2, pi/2] range,
    including cos 2t == 0 where a plain ratio arctangent is undefined; a
    pixel with both components zero decodes to 0 by atan2 convention.
    """
    sin_map = np.asarray(sin_map)
    cos_map = np.asarray(cos_map)
    if sin_map.shape != cos_map.shape:
        raise ValueError(f"angle maps differ in shape: {sin_map.shape} vs {cos_map.shape}")
    return 0.5 * np.arctan2(sin_map, cos_map)


def extract_grasps(maps: GraspMaps, top_k: int = 1, smooth_sigma: float = 2.0,
                   min_distance: float = 10.0) -> list[GraspRect]:
    """Pick the strongest local maxima of the (smoothed) quality map.

    Flat-topped maxima (plateaus) collapse to one candidate anchored at the
    plateau pixel nearest its centroid, so wide painted regions resolve to
    their centers.  Candidates are ranked by quality (row-major tiebreak)
    and greedily thinned so no two picks lie within `min_distance` pixels.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    q = ndimage.gaussian_filter(np.asarray(maps.quality, dtype=np.float64),
                                smooth_sigma, mode="nearest")
    local_max = (q == ndimage.maximum_filter(q, size=3, mode="nearest")) & (q > 0)
    labels, n_comp = ndimage.label(local_max)
    if n_comp == 0:
        return []
    candidates = []
    for comp in range(1, n_comp + 1):
        rows, cols = np.nonzero(labels == comp)
        cr, cc = rows.mean(), cols.mean()
        nearest = np.argmin((rows - cr) ** 2 + (cols - cc) ** 2)
        r, c = int(rows[nearest]), int(cols[nearest])
        candidates.append((-q[r, c], r, c))
    candidates.sort()
    theta = decode_angle(maps.sin2t, maps.cos2t)
    picked: list[GraspRect] = []
    taken: list[tuple[int, int]] = []
    for negq, r, c in candidates:
        if any((r - tr) ** 2 + (c - tc) ** 2 < min_distance ** 2 for tr, tc in taken):
            continue
        w = WIDTH_SCALE * float(maps.width[r, c])
        picked.append(GraspRect((r, c), w, w / 2.0, float(theta[r, c]),
                                min(float(-negq), 1.0)))
        taken.append((r, c))
        if len(picked) == top_k:
            break
    return picked


# ---------------------------------------------------------------------------
# rotated-rectangle overlap
# ---------------------------------------------------------------------------


def _clip_polygon(subject: list, clip: list) -> list:
    """Sutherland-Hodgman clip of a polygon against a convex window."""
    # orient the clip polygon counterclockwise
    area2 = sum(x0 * y1 - x1 * y0
                for (x0, y0), (x1, y1) in zip(clip, clip[1:] + clip[:1]))
    if area2 < 0:
        clip = clip[::-1]

    output = subject
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            return []
        inputs, output = output, []
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0]) >= 0.0

        s = inputs[-1]
        for e in inputs:
            if inside(e):
                if not inside(s):
                    output.append(_segment_intersection(cp1, cp2, s, e))
                output.append(e)
            elif inside(s):
                output.append(_segment_intersection(cp1, cp2, s, e))
            s = e
        cp1 = cp2
    return output


def _segment_intersection(a, b, p, q):
    dax, day = a[0] - b[0], a[1] - b[1]
    dpx, dpy = p[0] - q[0], p[1] - q[1]
    n1 = a[0] * b[1] - a[1] * b[0]
    n2 = p[0] * q[1] - p[1] * q[0]
    denom = dax * dpy - day * dpx
    return ((n1 * dpx - n2 * dax) / denom, (n1 * dpy - n2 * day) / denom)


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    return 0.5 * abs(sum(x0 * y1 - x1 * y0
                         for (x0, y0), (x1, y1) in zip(poly, poly[1:] + poly[:1])))


def rect_iou(a: GraspRect, b: GraspRect) -> float:
    """Intersection-over-union of two rotated rectangles via polygon clipping."""
    pa = [tuple(p) for p in a.corners()]
    pb = [tuple(p) for p in b.corners()]
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    if area_a < 1e-12 or area_b < 1e-12:
        warnings.warn("degenerate rectangle in rect_iou; returning 0")
        return 0.0
    inter = _polygon_area(_clip_polygon(pa, pb))
    union = area_a + area_b - inter
    return float(inter / union)


def is_success(pred: GraspRect, gt_list, angle_tol: float = math.pi / 6,
               iou_thresh: float = 0.25) -> bool:
    """A prediction counts iff some ground-truth rectangle is both within
    `angle_tol` (mod pi, strict) and above `iou_thresh` overlap (strict)."""
    for gt in gt_list:
        if angular_distance(pred.angle, gt.angle) < angle_tol \
                and rect_iou(pred, gt) > iou_thresh:
            return True
    return False


def polygon_mask(corners: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Boolean raster of pixels whose centers fall inside a convex polygon."""
    h, w = hw
    corners = np.asarray(corners, dtype=np.float64)
    rmin = max(int(np.floor(corners[:, 0].min())), 0)
    rmax = min(int(np.ceil(corners[:, 0].max())) + 1, h)
    cmin = max(int(np.floor(corners[:, 1].min())), 0)
    cmax = min(int(np.ceil(corners[:, 1].max())) + 1, w)
    mask = np.zeros((h, w), dtype=bool)
    if rmin >= rmax or cmin >= cmax:
        return mask
    rr, cc = np.meshgrid(np.arange(rmin, rmax), np.arange(cmin, cmax),
                         indexing="ij")
    inside = np.ones(rr.shape, dtype=bool)
    n = len(corners)
    area2 = sum(corners[i][0] * corners[(i + 1) % n][1]
                - corners[(i + 1) % n][0] * corners[i][1] for i in range(n))
    sign = 1.0 if area2 >= 0 else -1.0
    for i in range(n):
        p0, p1 = corners[i], corners[(i + 1) % n]
        cross = (p1[0] - p0[0]) * (cc - p0[1]) - (p1[1] - p0[1]) * (rr - p0[0])
        inside &= sign * cross >= 0
    mask[rmin:rmax, cmin:cmax] = inside
    return mask
