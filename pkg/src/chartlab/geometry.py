"""Keypoint-to-polygon annotation conversion and mask utilities.

Chart objects arrive as keypoints (pie slices as center + two edge
vertices, lines as centerline points, everything else as box corners) and
leave as simple polygons in image pixel coordinates, plus the raster-side
helpers (scanline fill, mask IoU, tight boxes) the rest of the package
evaluates against.

All polygon coordinates are (x, y) with y growing downward; pixel (row i,
col j) covers [j, j+1] x [i, i+1] and its center is (j+0.5, i+0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = (
    "Bar",
    "Line",
    "Pie",
    "Legend",
    "ValueAxisTitle",
    "ChartTitle",
    "CategoryAxisTitle",
)
CATEGORY_IDS = {name: i + 1 for i, name in enumerate(CATEGORIES)}
RECT_CATEGORIES = frozenset(CATEGORIES) - {"Line", "Pie"}

# anti-spike handling for line bends: below this interior angle the bend
# vertex is duplicated and the copies nudged apart along the centerline
SPIKE_ANGLE_DEG = 30.0
SPIKE_SHIFT_PX = 0.25

DEFAULT_LINE_THICKNESS_FRAC = 0.01
DEFAULT_POINTS_PER_RADIAN = 5.0


class GeometryError(ValueError):
    """Rejected input: degenerate or out-of-contract geometry."""


@dataclass
class KeypointRecord:
    """One chart object in keypoint form.

    Pie records carry exactly [center, edge-vertex-1, edge-vertex-2] plus a
    winding flag saying which of the two candidate arcs is the slice; line
    records carry >= 2 centerline points; rectangle categories carry the two
    opposite box corners.
    """

    category: str
    points: list[tuple[float, float]]
    image_size: tuple[int, int]  # (H, W)
    roles: list[str] | None = None
    winding: str = "ccw"


@dataclass
class PolygonAnnotation:
    """A category plus a flat [x1, y1, ..., xn, yn] vertex list."""

    category: str
    polygon: list[float]
    image_size: tuple[int, int] | None = None

    @property
    def vertices(self) -> np.ndarray:
        return np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)

    def area(self) -> float:
        return shoelace_area(self.vertices)

    def bbox_xywh(self) -> list[float]:
        v = self.vertices
        x0, y0 = v.min(axis=0)
        x1, y1 = v.max(axis=0)
        return [float(x0), float(y0), float(x1 - x0), float(y1 - y0)]


# -- basic polygon helpers -------------------------------------------------


def shoelace_area(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def _segments_intersect(p1, p2, p3, p4) -> bool:
    """Proper intersection test for open segments (shared endpoints ignored)."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def polygon_is_simple(vertices: np.ndarray) -> bool:
    """O(n^2) segment-intersection check; adjacent edges may share endpoints."""
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    edges = [(v[i], v[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def point_in_polygon(point, vertices: np.ndarray) -> bool:
    """Even-odd ray cast with a half-open edge rule."""
    x, y = float(point[0]), float(point[1])
    v = np.asarray(vertices, dtype=np.float64)
    inside = False
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        if (y1 <= y) != (y2 <= y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def clip_polygon_to_rect(vertices: np.ndarray, width: float, height: float) -> np.ndarray:
    """Sutherland-Hodgman clip against [0, width] x [0, height]."""
    def clip_edge(poly, inside, intersect):
        out = []
        n = len(poly)
        for i in range(n):
            cur, nxt = poly[i], poly[(i + 1) % n]
            cin, nin = inside(cur), inside(nxt)
            if cin:
                out.append(cur)
                if not nin:
                    out.append(intersect(cur, nxt))
            elif nin:
                out.append(intersect(cur, nxt))
        return out

    def x_cross(a, b, x0):
        t = (x0 - a[0]) / (b[0] - a[0])
        return (x0, a[1] + t * (b[1] - a[1]))

    def y_cross(a, b, y0):
        t = (y0 - a[1]) / (b[1] - a[1])
        return (a[0] + t * (b[0] - a[0]), y0)

    poly = [tuple(p) for p in np.asarray(vertices, dtype=np.float64)]
    for inside, intersect in (
        (lambda p: p[0] >= 0.0, lambda a, b: x_cross(a, b, 0.0)),
        (lambda p: p[0] <= width, lambda a, b: x_cross(a, b, width)),
        (lambda p: p[1] >= 0.0, lambda a, b: y_cross(a, b, 0.0)),
        (lambda p: p[1] <= height, lambda a, b: y_cross(a, b, height)),
    ):
        if not poly:
            break
        poly = clip_edge(poly, inside, intersect)
    return np.asarray(poly, dtype=np.float64).reshape(-1, 2)


def _flat(vertices: np.ndarray) -> list[float]:
    return [float(c) for c in np.asarray(vertices, dtype=np.float64).reshape(-1)]


# -- keypoints -> polygons ---------------------------------------------------


def pie_polygon(center, v1, v2, points_per_radian: float = DEFAULT_POINTS_PER_RADIAN,
                winding: str = "ccw", image_size=None) -> PolygonAnnotation:
    """Pie slice polygon: [center, v1, interpolated arc points, v2].

    The arc is approximated by round(points_per_radian * sweep) intermediate
    vertices whose angles and radii are linearly interpolated between the
    two edge vertices. ``winding`` selects which of the two candidate arcs
    from v1 to v2 is the slice ("ccw" sweeps counter-clockwise in standard
    x/y orientation).
    """
    cx, cy = float(center[0]), float(center[1])
    r1 = math.hypot(v1[0] - cx, v1[1] - cy)
    r2 = math.hypot(v2[0] - cx, v2[1] - cy)
    if r1 <= 0.0 or r2 <= 0.0:
        raise GeometryError("pie edge vertex coincides with the center (zero radius)")
    th1 = math.atan2(v1[1] - cy, v1[0] - cx)
    th2 = math.atan2(v2[1] - cy, v2[0] - cx)
    if winding not in ("ccw", "cw"):
        raise GeometryError(f"unknown winding {winding!r}")
    if winding == "ccw":
        sweep = (th2 - th1) % (2.0 * math.pi)
    else:
        sweep = -((th1 - th2) % (2.0 * math.pi))
    if abs(sweep) < 1e-12:
        raise GeometryError("degenerate pie slice: zero sweep between edge vertices")

    count = int(round(points_per_radian * abs(sweep)))
    verts = [(cx, cy), (float(v1[0]), float(v1[1]))]
    for k in range(1, count + 1):
        t = k / (count + 1)
        th = th1 + t * sweep
        r = r1 + t * (r2 - r1)
        verts.append((cx + r * math.cos(th), cy + r * math.sin(th)))
    verts.append((float(v2[0]), float(v2[1])))
    return PolygonAnnotation("Pie", _flat(np.array(verts)), image_size)


def _interior_angle(prev_pt, corner, next_pt) -> float:
    a = np.asarray(prev_pt, dtype=np.float64) - np.asarray(corner, dtype=np.float64)
    b = np.asarray(next_pt, dtype=np.float64) - np.asarray(corner, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cosang = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(cosang))


def _split_spike_vertices(points: np.ndarray, shift: float) -> np.ndarray:
    """Duplicate vertices at bends sharper than SPIKE_ANGLE_DEG and nudge
    the copies apart along the centerline, halving the turn at each copy."""
    out = [points[0]]
    for i in range(1, len(points) - 1):
        ang = _interior_angle(points[i - 1], points[i], points[i + 1])
        if ang < SPIKE_ANGLE_DEG:
            d_in = points[i] - points[i - 1]
            d_out = points[i + 1] - points[i]
            l_in, l_out = np.linalg.norm(d_in), np.linalg.norm(d_out)
            s_in = min(shift / 2.0, l_in / 4.0)
            s_out = min(shift / 2.0, l_out / 4.0)
            out.append(points[i] - d_in / l_in * s_in)
            out.append(points[i] + d_out / l_out * s_out)
        else:
            out.append(points[i])
    out.append(points[-1])
    return np.asarray(out)


def _offset_polyline(points: np.ndarray, offset: float) -> np.ndarray:
    """One side of the thick line: per-segment parallels joined at their
    intersection points (miter); squared-off endpoints."""
    dirs = np.diff(points, axis=0)
    lens = np.linalg.norm(dirs, axis=1)
    dirs = dirs / lens[:, None]
    normals = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)

    verts = [points[0] + offset * normals[0]]
    for i in range(1, len(points) - 1):
        p_prev = points[i - 1] + offset * normals[i - 1]
        p_next = points[i] + offset * normals[i]
        d1, d2 = dirs[i - 1], dirs[i]
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(cross) < 1e-12:  # collinear segments share the parallel
            verts.append(points[i] + offset * normals[i])
            continue
        # line(p_prev, d1) x line(p_next, d2)
        t = ((p_next[0] - p_prev[0]) * d2[1] - (p_next[1] - p_prev[1]) * d2[0]) / cross
        verts.append(p_prev + t * d1)
    verts.append(points[-1] + offset * normals[-1])
    return _trim_chain(np.asarray(verts))


def _seg_intersection_point(p1, p2, p3, p4):
    d1 = p2 - p1
    d2 = p4 - p3
    cross = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(cross) < 1e-12:
        return None
    t = ((p3[0] - p1[0]) * d2[1] - (p3[1] - p1[1]) * d2[0]) / cross
    s = ((p3[0] - p1[0]) * d1[1] - (p3[1] - p1[1]) * d1[0]) / cross
    if 1e-9 < t < 1.0 - 1e-9 and 1e-9 < s < 1.0 - 1e-9:
        return p1 + t * d1
    return None


def _trim_chain(verts: np.ndarray) -> np.ndarray:
    """Collapse self-intersections of an open offset chain to their
    intersection point. Folds appear on the inner side of sharp bends once
    the spike split separates the offending edges; trimming restores a
    simple boundary."""
    pts = [v for v in verts]
    changed = True
    while changed and len(pts) > 3:
        changed = False
        n = len(pts)
        for i in range(n - 1):
            for j in range(n - 2, i + 1, -1):
                p = _seg_intersection_point(pts[i], pts[i + 1], pts[j], pts[j + 1])
                if p is not None:
                    pts = pts[:i + 1] + [p] + pts[j + 1:]
                    changed = True
                    break
            if changed:
                break
    return np.asarray(pts)


def line_polygon(points, image_height: float,
                 thickness_frac: float = DEFAULT_LINE_THICKNESS_FRAC,
                 image_size=None) -> PolygonAnnotation:
    """Thicken a centerline into a polygon.

    Thickness is ``thickness_frac`` of the image height (the annotation
    convention, not necessarily the drawn width). The polygon edges are the
    per-segment parallels at half-thickness on each side, with miter joins;
    endpoints are squared off. Bends sharper than 30 degrees get the
    anti-spike vertex split first so the miters stay short.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise GeometryError("line needs at least 2 centerline points")
    if (np.linalg.norm(np.diff(pts, axis=0), axis=1) < 1e-12).any():
        raise GeometryError("consecutive centerline points must be distinct")
    thickness = thickness_frac * float(image_height)
    pts = _split_spike_vertices(pts, SPIKE_SHIFT_PX)
    upper = _offset_polyline(pts, thickness / 2.0)
    lower = _offset_polyline(pts, -thickness / 2.0)
    verts = np.concatenate([upper, lower[::-1]], axis=0)
    return PolygonAnnotation("Line", _flat(verts), image_size)


def rect_polygon(corner_min, corner_max, category: str = "Bar",
                 image_size=None) -> PolygonAnnotation:
    """Axis-aligned rectangle, counter-clockwise from corner_min."""
    x0, y0 = float(corner_min[0]), float(corner_min[1])
    x1, y1 = float(corner_max[0]), float(corner_max[1])
    if not (x0 < x1 and y0 < y1):
        raise GeometryError(f"rectangle corners must satisfy min < max, got {corner_min}, {corner_max}")
    return PolygonAnnotation(category, [x0, y0, x1, y0, x1, y1, x0, y1], image_size)


# -- rasterization ----------------------------------------------------------


def rasterize(poly: PolygonAnnotation, image_size=None) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers -> bool mask (H, W)."""
    size = image_size or poly.image_size
    if size is None:
        raise GeometryError("rasterize needs an image size")
    h, w = int(size[0]), int(size[1])
    v = poly.vertices
    mask = np.zeros((h, w), dtype=bool)
    if len(v) < 3:
        return mask
    ys = v[:, 1]
    row_lo = max(0, int(math.floor(ys.min() - 0.5)))
    row_hi = min(h - 1, int(math.ceil(ys.max())))
    n = len(v)
    for i_row in range(row_lo, row_hi + 1):
        yc = i_row + 0.5
        xs = []
        for i in range(n):
            x1, y1 = v[i]
            x2, y2 = v[(i + 1) % n]
            if (y1 <= yc) != (y2 <= yc):  # half-open rule; horizontal edges skip
                xs.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        xs.sort()
        for xa, xb in zip(xs[::2], xs[1::2]):
            j_start = max(0, int(math.ceil(xa - 0.5)))
            j_end = min(w, int(math.ceil(xb - 0.5)))
            if j_end > j_start:
                mask[i_row, j_start:j_end] = True
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; 0 when both masks are empty."""
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def bbox_from_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x_min, y_min, x_max, y_max) over set pixels, inclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise GeometryError("bbox of an empty mask is undefined")
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


# -- dataset conversion ------------------------------------------------------


@dataclass
class ConversionReport:
    counts: dict[str, int] = field(default_factory=dict)
    rejected: list[dict] = field(default_factory=list)
    images: int = 0

    def to_dict(self) -> dict:
        return {"images": self.images, "counts": self.counts, "rejected": self.rejected}


def record_to_polygon(rec: KeypointRecord, points_per_radian: float = DEFAULT_POINTS_PER_RADIAN,
                      thickness_frac: float = DEFAULT_LINE_THICKNESS_FRAC) -> PolygonAnnotation:
    """Dispatch one keypoint record to its polygon construction."""
    h, w = rec.image_size
    if rec.category not in CATEGORY_IDS:
        raise GeometryError(f"unknown category {rec.category!r}")
    for x, y in rec.points:
        if not (0.0 <= x <= w and 0.0 <= y <= h):
            raise GeometryError(f"keypoint ({x}, {y}) outside image {w}x{h}")
    if rec.category == "Pie":
        if len(rec.points) != 3:
            raise GeometryError(f"pie record needs 3 points, got {len(rec.points)}")
        center, v1, v2 = rec.points
        if rec.roles:
            by_role = dict(zip(rec.roles, rec.points))
            center = by_role.get("center", center)
            v1 = by_role.get("edge-vertex-1", v1)
            v2 = by_role.get("edge-vertex-2", v2)
        poly = pie_polygon(center, v1, v2, points_per_radian, rec.winding, rec.image_size)
    elif rec.category == "Line":
        if len(rec.points) < 2:
            raise GeometryError("line record needs >= 2 points")
        poly = line_polygon(rec.points, h, thickness_frac, rec.image_size)
    else:
        if len(rec.points) != 2:
            raise GeometryError(f"{rec.category} record needs 2 corner points")
        p = np.asarray(rec.points, dtype=np.float64)
        cmin, cmax = p.min(axis=0), p.max(axis=0)
        poly = rect_polygon(cmin, cmax, rec.category, rec.image_size)
    clipped = clip_polygon_to_rect(poly.vertices, float(w), float(h))
    if len(clipped) < 3 or shoelace_area(clipped) <= 0.0:
        raise GeometryError("polygon degenerates after clipping to the image")
    return PolygonAnnotation(poly.category, _flat(clipped), rec.image_size)


def convert_dataset(in_path, out_path, points_per_radian: float = DEFAULT_POINTS_PER_RADIAN,
                    thickness_frac: float = DEFAULT_LINE_THICKNESS_FRAC) -> ConversionReport:
    """Convert a keypoints.json file to an instances.json file.

    Every object keeps its category; malformed records are skipped and
    listed in the report, never silently dropped. Output is byte-identical
    across reruns on the same input.
    """
    with open(in_path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    report = ConversionReport(counts={c: 0 for c in CATEGORIES})
    images_out = []
    annotations = []
    ann_id = 1
    for img in data.get("images", []):
        report.images += 1
        h, w = int(img["height"]), int(img["width"])
        entry = {"id": img["id"], "height": h, "width": w}
        if "file_name" in img:
            entry["file_name"] = img["file_name"]
        images_out.append(entry)
        for idx, obj in enumerate(img.get("objects", [])):
            try:
                rec = KeypointRecord(
                    category=obj["category"],
                    points=[(float(p[0]), float(p[1])) for p in obj["points"]],
                    image_size=(h, w),
                    roles=obj.get("role"),
                    winding=obj.get("winding", "ccw"),
                )
                poly = record_to_polygon(rec, points_per_radian, thickness_frac)
            except (GeometryError, KeyError, TypeError, ValueError) as err:
                report.rejected.append({"image_id": img["id"], "index": idx, "reason": str(err)})
                continue
            annotations.append({
                "id": ann_id,
                "image_id": img["id"],
                "category_id": CATEGORY_IDS[poly.category],
                "polygon": poly.polygon,
                "bbox": poly.bbox_xywh(),
            })
            ann_id += 1
            report.counts[poly.category] += 1
    out = {
        "images": images_out,
        "annotations": annotations,
        "categories": [{"id": CATEGORY_IDS[c], "name": c} for c in CATEGORIES],
    }
    Path(out_path).write_text(json.dumps(out, sort_keys=True), encoding="utf-8")
    return report
