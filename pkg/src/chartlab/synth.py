"""Synthetic chart generator with exact ground truth.

Charts are drawn by rasterizing polygons (no anti-aliasing), so every
object's mask is known exactly. Keypoints are emitted in the same form a
real keypoint dataset would provide (box corners, pie center + edge
vertices + winding, line centerline points), making the keypoint-to-
polygon conversion testable against the renderer's own masks. Bar charts
additionally get templated question/answer pairs with exact answers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as G
from .geometry import CATEGORIES

PALETTE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.15, 0.65, 0.25),
    "blue": (0.15, 0.35, 0.8),
    "orange": (0.95, 0.6, 0.1),
    "purple": (0.55, 0.2, 0.7),
    "teal": (0.1, 0.65, 0.65),
}
STRUCTURE_COLORS = {
    "ChartTitle": (0.2, 0.2, 0.25),
    "ValueAxisTitle": (0.45, 0.45, 0.5),
    "CategoryAxisTitle": (0.5, 0.45, 0.4),
    "Legend": (0.75, 0.65, 0.2),
    "Line": (0.1, 0.1, 0.4),
}
QUESTION_TEMPLATES = ("value_by_color", "tallest_color", "leftmost_value", "rightmost_value")

# singletons: at most one instance per image makes visual sense
_SINGLETON = ("Legend", "ValueAxisTitle", "ChartTitle", "CategoryAxisTitle")


def default_count_ranges() -> dict[str, tuple[int, int]]:
    return {
        "Bar": (2, 4),
        "Line": (0, 0),
        "Pie": (0, 0),
        "Legend": (1, 1),
        "ValueAxisTitle": (1, 1),
        "ChartTitle": (1, 1),
        "CategoryAxisTitle": (1, 1),
    }


class SynthError(ValueError):
    """Rejected synthetic-data configuration."""


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    num_images: int = 20
    count_ranges: dict = field(default_factory=default_count_ranges)
    line_thickness_frac: float = 0.04
    questions_per_image: int = 1
    question_templates: tuple[str, ...] = QUESTION_TEMPLATES
    palette: tuple[str, ...] = tuple(PALETTE)

    def __post_init__(self):
        if self.image_size % 32:
            raise SynthError("image size must divide 32")
        for cat, rng_pair in self.count_ranges.items():
            if cat not in CATEGORIES:
                raise SynthError(f"unknown category {cat!r} in count ranges")
            lo, hi = rng_pair
            if not (0 <= lo <= hi):
                raise SynthError(f"bad count range for {cat}: {rng_pair}")
            if cat in _SINGLETON and hi > 1:
                raise SynthError(f"{cat} supports at most one instance per image")
            if cat == "Pie" and hi > 0 and max(lo, 2) > hi:
                raise SynthError("pie slices come in groups of >= 2")
        for tpl in self.question_templates:
            if tpl not in QUESTION_TEMPLATES:
                raise SynthError(f"unknown question template {tpl!r}")
        for name in self.palette:
            if name not in PALETTE:
                raise SynthError(f"unknown palette color {name!r}")

    def range_for(self, category: str) -> tuple[int, int]:
        return tuple(self.count_ranges.get(category, (0, 0)))


@dataclass
class ChartObject:
    category: str
    keypoints: list[tuple[float, float]]
    mask: np.ndarray
    roles: list[str] | None = None
    winding: str | None = None


@dataclass
class ChartSample:
    index: int
    image: np.ndarray                      # (H, W, 3) float in [0, 1]
    objects: list[ChartObject] = field(default_factory=list)
    questions: list[tuple[str, str]] = field(default_factory=list)

    @property
    def file_name(self) -> str:
        return f"images/chart_{self.index:05d}.png"


def _rect_object(category: str, x0, y0, x1, y1, size: int) -> ChartObject:
    poly = G.rect_polygon((x0, y0), (x1, y1), category, (size, size))
    return ChartObject(category, [(x0, y0), (x1, y1)], G.rasterize(poly, (size, size)))


def _capsule_mask(points: np.ndarray, thickness: float, size: int) -> np.ndarray:
    """Distance-based line rendering (round joins and caps); independent of
    the miter-polygon annotation construction."""
    yy, xx = np.mgrid[0:size, 0:size]
    cx = xx + 0.5
    cy = yy + 0.5
    best = np.full((size, size), np.inf)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        t = ((cx - a[0]) * ab[0] + (cy - a[1]) * ab[1]) / float(ab @ ab)
        t = np.clip(t, 0.0, 1.0)
        best = np.minimum(best, np.hypot(cx - (a[0] + t * ab[0]), cy - (a[1] + t * ab[1])))
    return best <= thickness / 2.0


def _sample_count(cfg: SynthConfig, category: str, rng: np.random.Generator) -> int:
    lo, hi = cfg.range_for(category)
    if hi == 0:
        return 0
    n = int(rng.integers(lo, hi + 1))
    if category == "Pie" and n == 1:
        n = 2
    return n


def generate_chart(cfg: SynthConfig, index: int, rng: np.random.Generator) -> ChartSample:
    s = cfg.image_size
    canvas = np.ones((s, s, 3))
    sample = ChartSample(index=index, image=canvas)

    def add(obj: ChartObject, color) -> None:
        canvas[obj.mask] = color
        sample.objects.append(obj)

    if _sample_count(cfg, "ChartTitle", rng):
        jitter = float(rng.uniform(0, 0.02)) * s
        add(_rect_object("ChartTitle", 0.16 * s + jitter, 0.03 * s, 0.84 * s - jitter,
                         0.11 * s, s), STRUCTURE_COLORS["ChartTitle"])
    if _sample_count(cfg, "ValueAxisTitle", rng):
        add(_rect_object("ValueAxisTitle", 0.03 * s, 0.22 * s, 0.09 * s, 0.78 * s, s),
            STRUCTURE_COLORS["ValueAxisTitle"])
    if _sample_count(cfg, "CategoryAxisTitle", rng):
        add(_rect_object("CategoryAxisTitle", 0.2 * s, 0.9 * s, 0.8 * s, 0.97 * s, s),
            STRUCTURE_COLORS["CategoryAxisTitle"])
    if _sample_count(cfg, "Legend", rng):
        add(_rect_object("Legend", 0.84 * s, 0.2 * s, 0.97 * s, 0.42 * s, s),
            STRUCTURE_COLORS["Legend"])

    n_bars = _sample_count(cfg, "Bar", rng)
    n_slices = _sample_count(cfg, "Pie", rng)
    n_lines = _sample_count(cfg, "Line", rng)

    # partition the plot area left-to-right among the active plot kinds so
    # ground-truth masks never occlude each other
    plot = (0.16 * s, 0.2 * s, 0.78 * s, 0.86 * s)
    kinds = [k for k, n in (("bar", n_bars), ("pie", n_slices), ("line", n_lines)) if n]
    if kinds:
        x0, y0, x1, y1 = plot
        width = (x1 - x0) / len(kinds)
        for i, kind in enumerate(kinds):
            region = (x0 + i * width, y0, x0 + (i + 1) * width - (2 if len(kinds) > 1 else 0), y1)
            if kind == "bar":
                _add_bars(cfg, sample, canvas, region, n_bars, rng)
            elif kind == "pie":
                _add_pie(cfg, sample, canvas, region, n_slices, rng)
            else:
                _add_lines(cfg, sample, canvas, region, n_lines, rng)
    return sample


def _add_bars(cfg, sample, canvas, region, n, rng):
    s = cfg.image_size
    x0, y0, x1, y1 = region
    values = rng.choice(np.arange(1, 10), size=n, replace=False)
    colors = list(rng.choice(list(cfg.palette), size=min(n, len(cfg.palette)), replace=False))
    while len(colors) < n:
        colors.append(str(cfg.palette[int(rng.integers(0, len(cfg.palette)))]))
    span = (x1 - x0) / n
    bars = []
    for i in range(n):
        bx0 = x0 + i * span + 0.2 * span
        bx1 = bx0 + 0.6 * span
        height = (y1 - y0) * values[i] / 10.0
        obj = _rect_object("Bar", bx0, y1 - height, bx1, y1, s)
        canvas[obj.mask] = PALETTE[colors[i]]
        sample.objects.append(obj)
        bars.append({"value": int(values[i]), "color": str(colors[i])})
    sample.questions.extend(_bar_questions(cfg, bars, rng))


def _bar_questions(cfg, bars, rng):
    questions = []
    templates = list(cfg.question_templates)
    for _ in range(cfg.questions_per_image):
        tpl = templates[int(rng.integers(0, len(templates)))]
        if tpl == "value_by_color":
            bar = bars[int(rng.integers(0, len(bars)))]
            questions.append((f"what is the value of the {bar['color']} bar", str(bar["value"])))
        elif tpl == "tallest_color":
            tallest = max(bars, key=lambda b: b["value"])
            questions.append(("what color is the tallest bar", tallest["color"]))
        elif tpl == "leftmost_value":
            questions.append(("what is the value of the leftmost bar", str(bars[0]["value"])))
        else:
            questions.append(("what is the value of the rightmost bar", str(bars[-1]["value"])))
    return questions


def _add_pie(cfg, sample, canvas, region, n, rng):
    s = cfg.image_size
    x0, y0, x1, y1 = region
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    radius = 0.42 * min(x1 - x0, y1 - y0)
    sweeps = rng.dirichlet(np.ones(n)) * 2 * math.pi
    sweeps = np.maximum(sweeps, 0.3)
    sweeps *= 2 * math.pi / sweeps.sum()
    colors = list(rng.choice(list(cfg.palette), size=min(n, len(cfg.palette)), replace=False))
    while len(colors) < n:
        colors.append(str(cfg.palette[int(rng.integers(0, len(cfg.palette)))]))
    theta = float(rng.uniform(0, 2 * math.pi))
    for i in range(n):
        t1, t2 = theta, theta + sweeps[i]
        v1 = (cx + radius * math.cos(t1), cy + radius * math.sin(t1))
        v2 = (cx + radius * math.cos(t2), cy + radius * math.sin(t2))
        # dense arc for the rendered mask; the annotation pipeline will
        # re-approximate it from the keypoints at its own coarser rate
        poly = G.pie_polygon((cx, cy), v1, v2, points_per_radian=60, winding="ccw",
                             image_size=(s, s))
        mask = G.rasterize(poly, (s, s))
        canvas[mask] = PALETTE[colors[i]]
        sample.objects.append(ChartObject(
            "Pie", [(cx, cy), v1, v2], mask,
            roles=["center", "edge-vertex-1", "edge-vertex-2"], winding="ccw"))
        theta = t2


def _add_lines(cfg, sample, canvas, region, n, rng):
    s = cfg.image_size
    x0, y0, x1, y1 = region
    lane = (y1 - y0) / n
    for li in range(n):
        npts = int(rng.integers(3, 6))
        xs = np.linspace(x0 + 2, x1 - 2, npts)
        ys = rng.uniform(y0 + li * lane + 2, y0 + (li + 1) * lane - 2, size=npts)
        points = np.stack([xs, ys], axis=1)
        mask = _capsule_mask(points, cfg.line_thickness_frac * s, s)
        canvas[mask] = STRUCTURE_COLORS["Line"]
        sample.objects.append(ChartObject("Line", [tuple(map(float, p)) for p in points], mask))


def generate_dataset(cfg: SynthConfig) -> list[ChartSample]:
    rng = np.random.default_rng(cfg.seed)
    return [generate_chart(cfg, i, rng) for i in range(cfg.num_images)]


# -- disk format ---------------------------------------------------------------


def image_to_png(image: np.ndarray, path) -> None:
    arr = np.clip(image * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    """PNG -> (3, H, W) float64 in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_dataset(samples: list[ChartSample], out_dir, cfg: SynthConfig) -> dict:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images_meta = []
    for sample in samples:
        image_to_png(sample.image, out / sample.file_name)
        objects = []
        for obj in sample.objects:
            entry = {"category": obj.category,
                     "points": [[float(x), float(y)] for x, y in obj.keypoints]}
            if obj.roles:
                entry["role"] = obj.roles
            if obj.winding:
                entry["winding"] = obj.winding
            objects.append(entry)
        images_meta.append({
            "id": sample.index,
            "height": cfg.image_size,
            "width": cfg.image_size,
            "file_name": sample.file_name,
            "objects": objects,
        })
    (out / "keypoints.json").write_text(json.dumps({"images": images_meta}, sort_keys=True),
                                        encoding="utf-8")
    qa = []
    for sample in samples:
        for question, answer in sample.questions:
            qa.append({"image": sample.file_name, "question": question, "answer": answer})
    (out / "qa_dataset.json").write_text(json.dumps(qa, sort_keys=True), encoding="utf-8")
    counts: dict[str, int] = {}
    for sample in samples:
        for obj in sample.objects:
            counts[obj.category] = counts.get(obj.category, 0) + 1
    return {"images": len(samples), "objects": counts, "qa_pairs": len(qa)}
