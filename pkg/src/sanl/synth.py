"""Procedural garment-like images with 8 landmarks, visibility flags and
category labels, plus the PPM/JSONL dataset format.

Generation is a pure function of (seed, index): geometry draws happen in a
fixed order from a per-sample RNG stream, so annotations can be produced
without rasterizing and parallel generation is order-independent. Colors are
random per sample (never correlated with the category); only the garment
shape carries the class signal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import Tensor

LANDMARK_NAMES = ("l_collar", "r_collar", "l_sleeve", "r_sleeve",
                  "l_waist", "r_waist", "l_hem", "r_hem")
CATEGORY_NAMES = ("tee", "shirt", "dress", "coat")

# sleeve kind, hem height and hem half-width per category; classes differ in
# sleeve length/angle and hem geometry only, never in color
_CATEGORY_SHAPE = {
    0: ("short", 0.54, 0.22),
    1: ("down", 0.54, 0.22),
    2: ("none", 0.90, 0.34),
    3: ("out", 0.90, 0.26),
}

# left-sleeve cuff corners (outer, inner) per sleeve kind, template units
_SLEEVE_CUFFS = {
    "short": ((0.155, 0.40), (0.225, 0.435)),
    "down": ((0.10, 0.64), (0.185, 0.66)),
    "out": ((0.055, 0.42), (0.125, 0.50)),
}

_LANDMARK_INSET = 0.042   # pull landmarks toward their part so jitter keeps them on cloth
_JITTER_SIGMA = 0.011     # relative to image size, clipped at 2 sigma


class DatasetFormatError(ValueError):
    """A dataset file failed to parse; the message carries file and position."""


@dataclass
class LandmarkAnnotation:
    landmarks: list          # 8 (x, y) pixel coordinates, may lie off-frame
    visibility: list         # 8 booleans; False = occluded or out of frame
    category: int
    image_id: str

    def to_json(self):
        return {
            "image_id": self.image_id,
            "category": int(self.category),
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
            "visibility": [bool(v) for v in self.visibility],
        }

    @classmethod
    def from_json(cls, d):
        return cls(landmarks=[(float(x), float(y)) for x, y in d["landmarks"]],
                   visibility=[bool(v) for v in d["visibility"]],
                   category=int(d["category"]), image_id=str(d["image_id"]))


@dataclass
class SynthSpec:
    seed: int
    count: int
    image_size: int = 64
    occlusion_prob: float = 0.3
    clutter_level: int = 6
    category_mix: tuple = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        self.category_mix = tuple(float(p) for p in self.category_mix)
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if len(self.category_mix) != len(CATEGORY_NAMES) or min(self.category_mix) < 0:
            raise ValueError("category_mix must be %d nonnegative weights" % len(CATEGORY_NAMES))
        total = sum(self.category_mix)
        if not np.isclose(total, 1.0):
            self.category_mix = tuple(p / total for p in self.category_mix)

    def to_dict(self):
        return {"seed": self.seed, "count": self.count, "image_size": self.image_size,
                "occlusion_prob": self.occlusion_prob, "clutter_level": self.clutter_level,
                "category_mix": list(self.category_mix)}

    @classmethod
    def from_dict(cls, d):
        return cls(seed=d["seed"], count=d["count"], image_size=d["image_size"],
                   occlusion_prob=d["occlusion_prob"], clutter_level=d["clutter_level"],
                   category_mix=tuple(d["category_mix"]))


class Sample(NamedTuple):
    image: Tensor            # (3, S, S) float64 in [0, 1], quantized at 8 bits
    annotation: LandmarkAnnotation


class GarmentTemplate(NamedTuple):
    polygons: list           # convex polygons, (k, 2) float arrays of (x, y) pixels
    landmarks: np.ndarray    # (8, 2) canonical landmark positions (already inset)


def garment_template(category, size):
    """Canonical garment geometry for a category, in pixel units, pose-free."""
    sleeve, hem_y, hem_hw = _CATEGORY_SHAPE[int(category)]
    lsh, rsh = np.array([0.28, 0.28]), np.array([0.72, 0.28])
    lcol, rcol = np.array([0.40, 0.24]), np.array([0.60, 0.24])
    lhem, rhem = np.array([0.5 - hem_hw, hem_y]), np.array([0.5 + hem_hw, hem_y])
    torso = np.array([lsh, lcol, rcol, rsh, rhem, lhem])
    polygons = [torso]

    def side_point(top, bottom, y):
        t = (y - top[1]) / (bottom[1] - top[1])
        return top + t * (bottom - top)

    anchors = np.zeros((8, 2))
    marks = np.zeros((8, 2))
    torso_center = torso.mean(axis=0)
    if sleeve == "none":
        marks[2], marks[3] = lsh, np.array([1.0 - lsh[0], lsh[1]])
        anchors[2] = anchors[3] = torso_center
    else:
        cuff_out, cuff_in = (np.array(p) for p in _SLEEVE_CUFFS[sleeve])
        underarm = side_point(lsh, lhem, 0.36)
        left_sleeve = np.array([lsh, underarm, cuff_in, cuff_out])
        right_sleeve = left_sleeve.copy()
        right_sleeve[:, 0] = 1.0 - right_sleeve[:, 0]
        polygons += [left_sleeve, right_sleeve]
        marks[2] = (cuff_out + cuff_in) / 2
        marks[3] = np.array([1.0 - marks[2][0], marks[2][1]])
        anchors[2] = left_sleeve.mean(axis=0)
        anchors[3] = right_sleeve.mean(axis=0)

    marks[0], marks[1] = lcol, rcol
    marks[4] = side_point(lsh, lhem, 0.44)
    marks[5] = np.array([1.0 - marks[4][0], marks[4][1]])
    marks[6], marks[7] = lhem, rhem
    anchors[0] = anchors[1] = anchors[4] = anchors[5] = anchors[6] = anchors[7] = torso_center

    direction = anchors - marks
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    marks = marks + direction / np.maximum(norm, 1e-9) * _LANDMARK_INSET

    return GarmentTemplate(polygons=[p * size for p in polygons], landmarks=marks * size)


class _Geometry(NamedTuple):
    category: int
    polygons: list
    landmarks: np.ndarray    # (8, 2) final pixel coordinates
    visibility: np.ndarray   # (8,) bool
    clutter: list            # (kind, params, color)
    occluder: tuple          # ((x0, y0, x1, y1), color) or None
    bg_color: np.ndarray
    garment_color: np.ndarray


def _sample_rng(spec, index):
    return np.random.default_rng([int(spec.seed) & 0xFFFFFFFF, int(index)])


def _sample_geometry(spec, index, pose=None, jitter=True):
    size = spec.image_size
    rng = _sample_rng(spec, index)
    category = int(rng.choice(len(CATEGORY_NAMES), p=spec.category_mix))
    template = garment_template(category, size)

    marks = template.landmarks.copy()
    if jitter:
        noise = rng.normal(0.0, _JITTER_SIGMA * size, (8, 2))
        marks += np.clip(noise, -2 * _JITTER_SIGMA * size, 2 * _JITTER_SIGMA * size)

    if pose == "identity":
        angle, scale, shift = 0.0, 1.0, np.zeros(2)
    elif pose is not None:
        angle, scale, shift = pose
        shift = np.asarray(shift, float)
    else:
        angle = rng.uniform(-25.0, 25.0) * np.pi / 180.0
        scale = rng.uniform(0.7, 1.3)
        shift = rng.uniform(-0.17, 0.17, 2) * size

    center = np.array([size / 2.0, size / 2.0])
    rot = scale * np.array([[np.cos(angle), -np.sin(angle)],
                            [np.sin(angle), np.cos(angle)]])

    def warp(pts):
        return (pts - center) @ rot.T + center + shift

    polygons = [warp(p) for p in template.polygons]
    marks = warp(marks)

    bg = rng.integers(120, 256, 3)
    garment = rng.integers(0, 256, 3)
    for _ in range(10):
        if np.abs(garment.astype(int) - bg.astype(int)).sum() >= 120:
            break
        garment = rng.integers(0, 256, 3)

    clutter = []
    for _ in range(spec.clutter_level):
        kind = int(rng.integers(0, 3))
        c = rng.uniform(0.05, 0.95, 2) * size
        dims = rng.uniform(0.03, 0.12, 2) * size
        theta = rng.uniform(0.0, np.pi)
        color = rng.integers(0, 256, 3)
        clutter.append((kind, (c, dims, theta), color))

    occluder = None
    if rng.random() < spec.occlusion_prob:
        oc = rng.uniform(0.2, 0.8, 2) * size
        half = rng.uniform(0.11, 0.24, 2) * size
        color = rng.integers(0, 256, 3)
        occluder = ((oc[0] - half[0], oc[1] - half[1], oc[0] + half[0], oc[1] + half[1]), color)

    visibility = np.ones(8, bool)
    for i, (x, y) in enumerate(marks):
        if not (0.0 <= x <= size - 1 and 0.0 <= y <= size - 1):
            visibility[i] = False
        elif occluder is not None:
            x0, y0, x1, y1 = occluder[0]
            if x0 <= x <= x1 and y0 <= y <= y1:
                visibility[i] = False

    geom = _Geometry(category, polygons, marks, visibility, clutter, occluder,
                     bg.astype(np.uint8), garment.astype(np.uint8))
    return geom, rng


_GRID_CACHE = {}


def _grid(size):
    hit = _GRID_CACHE.get(size)
    if hit is None:
        ys, xs = np.mgrid[0:size, 0:size]
        hit = (xs.astype(np.float64), ys.astype(np.float64))
        _GRID_CACHE[size] = hit
    return hit


def _fill_convex(size, pts):
    xs, ys = _grid(size)
    pts = np.asarray(pts, float)
    area = 0.0
    for i in range(len(pts)):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % len(pts)]
        area += x0 * y1 - x1 * y0
    if area < 0:
        pts = pts[::-1]
    inside = np.ones((size, size), bool)
    for i in range(len(pts)):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % len(pts)]
        inside &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
    return inside


def _fill_ellipse(size, center, dims, theta):
    xs, ys = _grid(size)
    dx, dy = xs - center[0], ys - center[1]
    cos, sin = np.cos(theta), np.sin(theta)
    u = (dx * cos + dy * sin) / max(dims[0], 1e-6)
    v = (-dx * sin + dy * cos) / max(dims[1], 1e-6)
    return u * u + v * v <= 1.0


def _clutter_mask(size, kind, params):
    center, dims, theta = params
    if kind == 1:
        return _fill_ellipse(size, center, dims, theta)
    if kind == 2:  # triangle
        base = np.array([[-dims[0], dims[1]], [dims[0], dims[1]], [0.0, -dims[1]]])
    else:  # rectangle
        base = np.array([[-dims[0], -dims[1]], [dims[0], -dims[1]],
                         [dims[0], dims[1]], [-dims[0], dims[1]]])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return _fill_convex(size, base @ rot.T + center)


def garment_mask(spec, index):
    """Boolean (S, S) mask of the garment polygons for sample ``index``."""
    geom, _ = _sample_geometry(spec, index)
    size = spec.image_size
    mask = np.zeros((size, size), bool)
    for poly in geom.polygons:
        mask |= _fill_convex(size, poly)
    return mask


def _render_u8(spec, geom, rng):
    size = spec.image_size
    img = np.empty((size, size, 3), np.uint8)
    img[...] = geom.bg_color
    for kind, params, color in geom.clutter:
        img[_clutter_mask(size, kind, params)] = color
    for poly in geom.polygons:
        img[_fill_convex(size, poly)] = geom.garment_color
    if geom.occluder is not None:
        (x0, y0, x1, y1), color = geom.occluder
        xs, ys = _grid(size)
        img[(xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)] = color
    noise = rng.integers(-4, 5, (size, size, 1))
    return np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8)


def _image_id(index):
    return "img_%05d" % index


def generate_sample_u8(spec, index, pose=None, jitter=True):
    """(H, W, 3) uint8 image plus annotation; the byte-exact dataset form."""
    if not 0 <= index < spec.count:
        raise IndexError("sample index %d out of range for count %d" % (index, spec.count))
    geom, rng = _sample_geometry(spec, index, pose=pose, jitter=jitter)
    img = _render_u8(spec, geom, rng)
    ann = LandmarkAnnotation(landmarks=[(float(x), float(y)) for x, y in geom.landmarks],
                             visibility=[bool(v) for v in geom.visibility],
                             category=geom.category, image_id=_image_id(index))
    return img, ann


def generate_annotation(spec, index):
    """Annotation only; skips rasterization (used by statistical checks)."""
    geom, _ = _sample_geometry(spec, index)
    return LandmarkAnnotation(landmarks=[(float(x), float(y)) for x, y in geom.landmarks],
                              visibility=[bool(v) for v in geom.visibility],
                              category=geom.category, image_id=_image_id(index))


def generate_sample(spec, index, pose=None, jitter=True):
    """Deterministic (seed, index)-derived sample: (image Tensor, annotation)."""
    img, ann = generate_sample_u8(spec, index, pose=pose, jitter=jitter)
    return Sample(image=Tensor(img.transpose(2, 0, 1) / 255.0), annotation=ann)


def generate_dataset(spec):
    return [generate_sample(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# on-disk format: spec.json + annotations.jsonl + img_<index>.ppm (binary P6)

def write_ppm(path, rgb):
    """Write an (H, W, 3) uint8 array as binary PPM (P6, maxval 255)."""
    rgb = np.asarray(rgb, np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def read_ppm(path):
    """Read a binary PPM; raises DatasetFormatError with the failing position."""
    with open(path, "rb") as fh:
        data = fh.read()

    def fail(pos, why):
        raise DatasetFormatError("%s: byte %d: %s" % (path, pos, why))

    pos = 0

    def token():
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            return token()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            fail(start, "truncated header")
        return data[start:pos]

    if token() != b"P6":
        fail(0, "not a binary PPM (expected P6)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        fail(pos, "non-numeric header field")
    if maxval != 255:
        fail(pos, "unsupported maxval %d" % maxval)
    pos += 1  # the single whitespace byte after maxval
    need = w * h * 3
    if len(data) - pos < need:
        fail(len(data), "pixel data truncated (%d of %d bytes)" % (len(data) - pos, need))
    return np.frombuffer(data[pos:pos + need], np.uint8).reshape(h, w, 3)


def write_dataset(spec, directory):
    """Materialize a dataset: spec.json, annotations.jsonl and one PPM per sample."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(directory, "annotations.jsonl"), "w") as fh:
        for i in range(spec.count):
            img, ann = generate_sample_u8(spec, i)
            write_ppm(os.path.join(directory, ann.image_id + ".ppm"), img)
            fh.write(json.dumps(ann.to_json(), sort_keys=True))
            fh.write("\n")
    return directory


def read_dataset(directory):
    """Load a dataset written by write_dataset; returns (spec, list of Samples)."""
    spec_path = os.path.join(directory, "spec.json")
    try:
        with open(spec_path) as fh:
            spec = SynthSpec.from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetFormatError("%s: %s" % (spec_path, exc))
    ann_path = os.path.join(directory, "annotations.jsonl")
    samples = []
    with open(ann_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ann = LandmarkAnnotation.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetFormatError("%s: line %d: %s" % (ann_path, lineno, exc))
            img = read_ppm(os.path.join(directory, ann.image_id + ".ppm"))
            samples.append(Sample(image=Tensor(img.transpose(2, 0, 1) / 255.0),
                                  annotation=ann))
    return spec, samples
