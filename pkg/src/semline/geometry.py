"""Lines anchored on the boundary of an image rectangle.

Coordinates are continuous: the image occupies ``[0, W] x [0, H]`` with ``x``
growing right and ``y`` growing down, and pixel ``(row i, col j)`` has its
center at ``(j + 0.5, i + 0.5)``. Perimeter arc length runs clockwise (on
screen) from the corner ``(0, 0)``: top edge, right edge, bottom edge, left
edge.

Polygon vertex lists have positive shoelace area ("counter-clockwise" in the
usual right-handed convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateLineError, EmptyCandidatesError, ValidationError

BOUNDARY_TOL = 1e-9
MIN_ENDPOINT_GAP = 1e-6
PARALLEL_TOL = 1e-9
MIN_REGION_AREA = 1e-9

TOP, RIGHT, BOTTOM, LEFT = range(4)

Point = tuple[float, float]


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError(f"image size must be integral, got {self.width}x{self.height}")
        if self.width < 2 or self.height < 2:
            raise ValidationError(f"image size must be at least 2x2, got {self.width}x{self.height}")

    @property
    def area(self) -> float:
        return float(self.width * self.height)

    @property
    def perimeter(self) -> float:
        return 2.0 * (self.width + self.height)

    def corners(self) -> list[Point]:
        w, h = float(self.width), float(self.height)
        return [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]


@dataclass(frozen=True)
class Line:
    x_s: float
    y_s: float
    x_e: float
    y_e: float

    @property
    def start(self) -> Point:
        return (self.x_s, self.y_s)

    @property
    def end(self) -> Point:
        return (self.x_e, self.y_e)

    def reversed(self) -> "Line":
        return Line(self.x_e, self.y_e, self.x_s, self.y_s)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_s, self.y_s, self.x_e, self.y_e], dtype=float)

    @classmethod
    def from_points(cls, p: Sequence[float], q: Sequence[float]) -> "Line":
        return cls(float(p[0]), float(p[1]), float(q[0]), float(q[1]))

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Line":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def lines_to_array(lines: Iterable[Line]) -> np.ndarray:
    arr = np.array([ln.as_array() for ln in lines], dtype=float)
    return arr.reshape(-1, 4)


# ---------------------------------------------------------------------------
# boundary bookkeeping


def boundary_distance(point: Point, size: ImageSize) -> float:
    x, y = point
    w, h = size.width, size.height
    if 0.0 <= x <= w and 0.0 <= y <= h:
        return min(x, w - x, y, h - y)
    dx = max(-x, 0.0, x - w)
    dy = max(-y, 0.0, y - h)
    return math.hypot(dx, dy)


def point_edges(point: Point, size: ImageSize, tol: float = BOUNDARY_TOL) -> set[int]:
    """Edges (TOP/RIGHT/BOTTOM/LEFT) the point lies on; corners lie on two."""
    x, y = point
    w, h = size.width, size.height
    edges = set()
    if -tol <= x <= w + tol:
        if abs(y) < tol:
            edges.add(TOP)
        if abs(y - h) < tol:
            edges.add(BOTTOM)
    if -tol <= y <= h + tol:
        if abs(x - w) < tol:
            edges.add(RIGHT)
        if abs(x) < tol:
            edges.add(LEFT)
    return edges


def check_line(line: Line, size: ImageSize) -> None:
    """Raise ValidationError unless ``line`` is a valid boundary line for ``size``."""
    for name, p in (("start", line.start), ("end", line.end)):
        if not all(math.isfinite(c) for c in p):
            raise ValidationError(f"{name} point {p} is not finite")
        if boundary_distance(p, size) >= BOUNDARY_TOL:
            raise ValidationError(f"{name} point {p} is not on the image boundary")
    if math.dist(line.start, line.end) <= MIN_ENDPOINT_GAP:
        raise DegenerateLineError(f"endpoints of {line} coincide")
    if point_edges(line.start, size) & point_edges(line.end, size):
        raise DegenerateLineError(f"{line} runs along an image edge")


def is_valid_line(line: Line, size: ImageSize) -> bool:
    try:
        check_line(line, size)
    except ValidationError:
        return False
    return True


def arc_length(point: Point, size: ImageSize) -> float:
    """Clockwise perimeter position of a boundary point, in [0, perimeter)."""
    x, y = point
    w, h = float(size.width), float(size.height)
    edges = point_edges(point, size)
    if TOP in edges:
        return min(max(x, 0.0), w)
    if RIGHT in edges:
        return w + min(max(y, 0.0), h)
    if BOTTOM in edges:
        return w + h + (w - min(max(x, 0.0), w))
    if LEFT in edges:
        return 2.0 * w + h + (h - min(max(y, 0.0), h))
    raise ValidationError(f"point {point} is not on the image boundary")


def point_at_arc(s: float, size: ImageSize) -> Point:
    w, h = float(size.width), float(size.height)
    s = s % (2.0 * (w + h))
    if s <= w:
        return (s, 0.0)
    if s <= w + h:
        return (w, s - w)
    if s <= 2 * w + h:
        return (w - (s - w - h), h)
    return (0.0, h - (s - 2 * w - h))


def canonical(line: Line, size: ImageSize) -> Line:
    """Order endpoints so the one with smaller arc length comes first."""
    if arc_length(line.end, size) < arc_length(line.start, size):
        return line.reversed()
    return line


def nearest_boundary_point(point: Point, size: ImageSize) -> Point:
    x, y = point
    w, h = float(size.width), float(size.height)
    if 0.0 <= x <= w and 0.0 <= y <= h:
        # inside: move to the closest edge (ties resolved top, right, bottom, left)
        options = [(y, (x, 0.0)), (w - x, (w, y)), (h - y, (x, h)), (x, (0.0, y))]
        return min(options, key=lambda t: t[0])[1]
    return (min(max(x, 0.0), w), min(max(y, 0.0), h))


# ---------------------------------------------------------------------------
# candidates


def perimeter_samples(size: ImageSize, step: float) -> list[Point]:
    if not step > 0:
        raise ValidationError(f"step must be positive, got {step}")
    perimeter = size.perimeter
    count = math.ceil(perimeter / step - 1e-12)
    return [point_at_arc(step * k, size) for k in range(count)]


def generate_candidates(size: ImageSize, step: float) -> list[Line]:
    """All valid lines between pairs of perimeter samples spaced ``step`` apart.

    Ordered lexicographically by the arc lengths of (start, end).
    """
    points = perimeter_samples(size, step)
    if len(points) < 4:
        raise EmptyCandidatesError(
            f"step {step} leaves only {len(points)} perimeter samples (need at least 4)")
    edges = [point_edges(p, size) for p in points]
    out = []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            if edges[i] & edges[j]:
                continue
            out.append(Line.from_points(points[i], points[j]))
    if not out:
        raise EmptyCandidatesError(f"step {step} yields no valid candidate line")
    return out


# ---------------------------------------------------------------------------
# distances and intersections


def signed_distance(line: Line, point: Point) -> float:
    """Signed perpendicular distance; negative on the left of start->end as drawn on screen."""
    dx, dy = line.x_e - line.x_s, line.y_e - line.y_s
    px, py = point[0] - line.x_s, point[1] - line.y_s
    return (px * dy - py * dx) / math.hypot(dx, dy)


def point_line_distance(line: Line, point: Point) -> float:
    return abs(signed_distance(line, point))


def signed_distance_grid(lines: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized signed distance of points ``(xs, ys)`` to each row of ``lines`` (N, 4).

    Returns an array of shape ``(N,) + xs.shape``.
    """
    lines = np.asarray(lines, dtype=float).reshape(-1, 4)
    sx, sy, ex, ey = (lines[:, k].reshape((-1,) + (1,) * xs.ndim) for k in range(4))
    dx, dy = ex - sx, ey - sy
    return ((xs - sx) * dy - (ys - sy) * dx) / np.hypot(dx, dy)


def intersect(a: Line, b: Line) -> Point | None:
    """Intersection of the two infinite lines, or None when they are parallel."""
    dax, day = a.x_e - a.x_s, a.y_e - a.y_s
    dbx, dby = b.x_e - b.x_s, b.y_e - b.y_s
    cross = dax * dby - day * dbx
    if abs(cross) < PARALLEL_TOL * math.hypot(dax, day) * math.hypot(dbx, dby):
        return None
    t = ((b.x_s - a.x_s) * dby - (b.y_s - a.y_s) * dbx) / cross
    return (a.x_s + t * dax, a.y_s + t * day)


# ---------------------------------------------------------------------------
# polygons


def polygon_area(poly: Sequence[Point]) -> float:
    """Signed shoelace area (positive for our vertex orientation)."""
    n = len(poly)
    if n < 3:
        return 0.0
    total = 0.0
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        total += x0 * y1 - x1 * y0
    return 0.5 * total


def clip_halfplane(poly: Sequence[Point], a: float, b: float, c: float) -> list[Point]:
    """Keep the part of ``poly`` where ``a*x + b*y + c <= 0`` (Sutherland-Hodgman step)."""
    out: list[Point] = []
    n = len(poly)
    for k in range(n):
        p = poly[k]
        q = poly[(k + 1) % n]
        fp = a * p[0] + b * p[1] + c
        fq = a * q[0] + b * q[1] + c
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> list[Point]:
    """Intersection of two convex polygons (both with positive orientation)."""
    out = list(subject)
    n = len(clip)
    for k in range(n):
        if len(out) < 3:
            return []
        (x0, y0), (x1, y1) = clip[k], clip[(k + 1) % n]
        # interior of a positively oriented polygon lies where cross(edge, p - p0) >= 0
        a = y1 - y0
        b = -(x1 - x0)
        c = -(a * x0 + b * y0)
        out = clip_halfplane(out, a, b, c)
    return out if len(out) >= 3 else []


def _halfplane_coeffs(line: Line) -> tuple[float, float, float]:
    """Coefficients (a, b, c) with a*x + b*y + c proportional to the signed distance."""
    dx, dy = line.x_e - line.x_s, line.y_e - line.y_s
    return dy, -dx, -(dy * line.x_s - dx * line.y_s)


def split_regions(line: Line, size: ImageSize) -> tuple[list[Point], list[Point]]:
    """The two convex pieces of the image rectangle cut by ``line``.

    The first piece is the negative side of the canonical line, i.e. the one
    holding the corner of smallest signed distance.
    """
    line = canonical(line, size)
    rect = size.corners()
    a, b, c = _halfplane_coeffs(line)
    first = clip_halfplane(rect, a, b, c)
    second = clip_halfplane(rect, -a, -b, -c)
    if min(polygon_area(first), polygon_area(second)) < MIN_REGION_AREA:
        raise DegenerateLineError(f"{line} does not split the {size.width}x{size.height} image")
    return first, second


def region_iou(p: Sequence[Point], q: Sequence[Point]) -> float:
    inter = clip_convex(p, q)
    ia = polygon_area(inter) if inter else 0.0
    union = polygon_area(p) + polygon_area(q) - ia
    return ia / union


def miou(a: Line, b: Line, size: ImageSize) -> float:
    """Mean IoU of the region pairs cut by two lines, maximized over the pairing."""
    a1, a2 = split_regions(a, size)
    b1, b2 = split_regions(b, size)
    straight = 0.5 * (region_iou(a1, b1) + region_iou(a2, b2))
    crossed = 0.5 * (region_iou(a1, b2) + region_iou(a2, b1))
    return min(1.0, max(0.0, straight, crossed))


# ---------------------------------------------------------------------------
# batched mIoU


def _first_regions(lines: np.ndarray, size: ImageSize) -> tuple[np.ndarray, np.ndarray]:
    """First-region polygons padded to 5 vertices (N, 5, 2) and their areas."""
    polys = np.empty((len(lines), 5, 2))
    areas = np.empty(len(lines))
    for k, row in enumerate(lines):
        first, _ = split_regions(Line.from_array(row), size)
        pts = first + [first[-1]] * (5 - len(first))
        polys[k] = pts
        areas[k] = polygon_area(first)
    return polys, areas


def _clipped_area(polys: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Area of padded polygons (Na, V, 2) restricted to ``a*x+b*y+c <= 0`` for
    every clip line in ``coeffs`` (Nb, 3); returns (Na, Nb).

    Shoelace over the surviving edge pieces plus the closing chord along the
    clip line; no polygon is materialized.
    """
    px, py = polys[..., 0][:, None, :], polys[..., 1][:, None, :]
    qx, qy = np.roll(px, -1, axis=-1), np.roll(py, -1, axis=-1)
    ex, ey = qx - px, qy - py
    edge_cross = px * qy - py * qx
    a, b, c = (coeffs[:, k][None, :, None] for k in range(3))
    fp = a * px + b * py + c
    fq = np.roll(fp, -1, axis=-1)
    in_p = fp <= 0
    in_q = fq <= 0
    exiting = in_p & ~in_q
    entering = in_q & ~in_p
    crossing = exiting | entering
    t = np.divide(fp, fp - fq, out=np.zeros_like(fp), where=crossing)
    xx = px + t * ex
    xy = py + t * ey
    # cross(p, x) and cross(x, q) for the partial edges
    total = np.where(in_p & in_q, edge_cross, 0.0)
    total += np.where(exiting, px * xy - py * xx, 0.0)
    total += np.where(entering, xx * qy - xy * qx, 0.0)
    out_x = np.where(exiting, xx, 0.0).sum(axis=-1)
    out_y = np.where(exiting, xy, 0.0).sum(axis=-1)
    in_x = np.where(entering, xx, 0.0).sum(axis=-1)
    in_y = np.where(entering, xy, 0.0).sum(axis=-1)
    return 0.5 * (total.sum(axis=-1) + out_x * in_y - out_y * in_x)


def _normalized_coeffs(lines: np.ndarray, size: ImageSize, offset: np.ndarray) -> np.ndarray:
    canon = np.array([canonical(Line.from_array(r), size).as_array() for r in lines]).reshape(-1, 4)
    sx, sy = canon[:, 0] - offset[0], canon[:, 1] - offset[1]
    dx, dy = canon[:, 2] - canon[:, 0], canon[:, 3] - canon[:, 1]
    norm = np.hypot(dx, dy)
    return np.stack([dy / norm, -dx / norm, -(dy * sx - dx * sy) / norm], axis=-1)


def miou_matrix(lines_a, lines_b=None, size: ImageSize = None, block: int = 128) -> np.ndarray:
    """mIoU between every line of ``lines_a`` and every line of ``lines_b``.

    Accepts lists of Line or (N, 4) arrays. Needs only one clip per pair: the
    other three region intersections follow from the region areas.
    """
    if size is None:
        raise TypeError("size is required")
    a_arr = lines_to_array(lines_a) if not isinstance(lines_a, np.ndarray) else lines_a.reshape(-1, 4)
    same = lines_b is None
    if same:
        b_arr = a_arr
    else:
        b_arr = lines_to_array(lines_b) if not isinstance(lines_b, np.ndarray) else lines_b.reshape(-1, 4)
    na, nb = len(a_arr), len(b_arr)
    out = np.empty((na, nb))
    if na == 0 or nb == 0:
        return out
    center = np.array([size.width / 2.0, size.height / 2.0])
    polys, areas_a = _first_regions(a_arr, size)
    polys = polys - center
    if same:
        areas_b = areas_a
    else:
        _, areas_b = _first_regions(b_arr, size)
    coeffs_b = _normalized_coeffs(b_arr, size, center)
    total = size.area
    for lo in range(0, na, block):
        hi = min(na, lo + block)
        # mIoU is symmetric: for the square case only columns >= lo are needed
        c0 = lo if same else 0
        inter = _clipped_area(polys[lo:hi], coeffs_b[c0:])
        a1 = areas_a[lo:hi, None]
        b1 = areas_b[None, c0:]
        i11 = np.clip(inter, 0.0, None)
        i12 = np.clip(a1 - i11, 0.0, None)
        i21 = np.clip(b1 - i11, 0.0, None)
        i22 = np.clip(total - a1 - b1 + i11, 0.0, None)
        a2 = total - a1
        b2 = total - b1
        straight = 0.5 * (i11 / (a1 + b1 - i11) + i22 / (a2 + b2 - i22))
        crossed = 0.5 * (i12 / (a1 + b2 - i12) + i21 / (a2 + b1 - i21))
        vals = np.clip(np.maximum(straight, crossed), 0.0, 1.0)
        out[lo:hi, c0:] = vals
        if same:
            out[c0:, lo:hi] = vals.T
    if same:
        out = 0.5 * (out + out.T)
        np.fill_diagonal(out, 1.0)
    return out
