"""Core types, annotation/mask file I/O and the crop rule.

Coordinates are continuous pixel coordinates with y pointing down. Pixel
``(row, col)`` covers the square ``[col, col + 1) x [row, row + 1)``, so the
pixel containing a point is ``(floor(y), floor(x))``.

Annotation files are JSON lines, one record per figure instance::

    {"image_id": "synth_00003", "athlete": null, "slowmotion": false,
     "keypoints": [[x, y, v], ... 17 triples in KEYPOINT_NAMES order]}

``v`` is 1 for visible and 0 otherwise; a triple may also be ``null``. A
record may alternatively give ``keypoints`` as an object keyed by keypoint
name, in which case absent names are treated as invisible.

Masks are 8-bit grayscale PNGs named ``<image_id>_<part>.png``; any nonzero
value is interior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

KEYPOINT_NAMES = (
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
    "l_ski_tip",
    "r_ski_tip",
    "l_ski_tail",
    "r_ski_tail",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
KEYPOINT_INDEX = {name: i for i, name in enumerate(KEYPOINT_NAMES)}

PART_NAMES = (
    "head",
    "torso",
    "l_upper_arm",
    "r_upper_arm",
    "l_forearm",
    "r_forearm",
    "l_hand",
    "r_hand",
    "l_thigh",
    "r_thigh",
    "l_lower_leg",
    "r_lower_leg",
    "l_foot",
    "r_foot",
    "l_ski",
    "r_ski",
)

# target size of the full-scale preset, (width, height)
PAPER_INPUT_SIZE = (192, 256)
CROP_MARGIN = 0.2


class AnnotationError(ValueError):
    """Malformed annotation record."""


class SchemaError(AnnotationError):
    """Record parses but violates the 17-slot schema."""


class DegenerateBoxError(ValueError):
    pass


def swap_lr(name):
    """Mirror a left/right keypoint or part name (``l_knee`` -> ``r_knee``)."""
    if name.startswith("l_"):
        return "r_" + name[2:]
    if name.startswith("r_"):
        return "l_" + name[2:]
    return name


# slot permutation under a horizontal flip
FLIP_PERMUTATION = tuple(KEYPOINT_INDEX[swap_lr(n)] for n in KEYPOINT_NAMES)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True
    score: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite keypoint ({self.x}, {self.y})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def xy(self):
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class PoseAnnotation:
    image_id: str
    keypoints: tuple
    slowmotion: bool = False
    athlete: str | None = None

    def __post_init__(self):
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise SchemaError(
                f"{self.image_id}: expected {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}"
            )
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def __getitem__(self, name):
        return self.keypoints[KEYPOINT_INDEX[name] if isinstance(name, str) else name]

    def xy(self):
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64)

    def visible(self):
        return np.array([k.visible for k in self.keypoints], dtype=bool)

    def to_record(self):
        return {
            "image_id": self.image_id,
            "athlete": self.athlete,
            "slowmotion": self.slowmotion,
            "keypoints": [[k.x, k.y, int(k.visible)] for k in self.keypoints],
        }

    @classmethod
    def from_arrays(cls, image_id, xy, visible=None, **kwargs):
        xy = np.asarray(xy, dtype=np.float64)
        if visible is None:
            visible = np.ones(len(xy), dtype=bool)
        kps = tuple(Keypoint(float(x), float(y), bool(v)) for (x, y), v in zip(xy, visible))
        return cls(image_id, kps, **kwargs)


@dataclass(frozen=True, eq=False)
class PartMask:
    part_id: str
    raster: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.part_id not in PART_NAMES:
            raise ValueError(f"unknown part {self.part_id!r}")
        raster = np.asarray(self.raster).astype(bool)
        if raster.ndim != 2:
            raise ValueError("mask raster must be 2-D")
        raster.setflags(write=False)
        object.__setattr__(self, "raster", raster)

    @property
    def width(self):
        return self.raster.shape[1]

    @property
    def height(self):
        return self.raster.shape[0]

    @property
    def empty(self):
        return not self.raster.any()

    def contains(self, points):
        """Interior test for an ``(..., 2)`` array of points."""
        pts = np.asarray(points, dtype=np.float64)
        col = np.floor(pts[..., 0]).astype(np.int64)
        row = np.floor(pts[..., 1]).astype(np.int64)
        inside = (col >= 0) & (row >= 0) & (col < self.width) & (row < self.height)
        out = np.zeros(inside.shape, dtype=bool)
        out[inside] = self.raster[row[inside], col[inside]]
        return out


def _parse_triple(value, where):
    if value is None:
        return Keypoint(0.0, 0.0, False)
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise AnnotationError(f"{where}: keypoint must be an [x, y, visible] triple")
    try:
        x, y, v = float(value[0]), float(value[1]), bool(int(value[2]))
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{where}: {exc}") from None
    return Keypoint(x, y, v)


def parse_annotation(record, where="record"):
    if not isinstance(record, dict):
        raise AnnotationError(f"{where}: expected an object")
    if "image_id" not in record or "keypoints" not in record:
        raise AnnotationError(f"{where}: missing image_id or keypoints")
    raw = record["keypoints"]
    if isinstance(raw, dict):
        unknown = set(raw) - set(KEYPOINT_NAMES)
        if unknown:
            raise SchemaError(f"{where}: unknown keypoint names {sorted(unknown)}")
        raw = [raw.get(name) for name in KEYPOINT_NAMES]
    if not isinstance(raw, list):
        raise AnnotationError(f"{where}: keypoints must be a list or an object")
    if len(raw) != NUM_KEYPOINTS:
        raise SchemaError(f"{where}: expected {NUM_KEYPOINTS} keypoints, got {len(raw)}")
    kps = tuple(_parse_triple(v, f"{where}, keypoint {i}") for i, v in enumerate(raw))
    return PoseAnnotation(
        image_id=str(record["image_id"]),
        keypoints=kps,
        slowmotion=bool(record.get("slowmotion", False)),
        athlete=record.get("athlete"),
    )


def load_annotations(path):
    annotations = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc.msg}") from None
            annotations.append(parse_annotation(record, where=f"{path}:{lineno}"))
    return annotations


def write_annotations(path, annotations):
    with open(path, "w") as f:
        for ann in annotations:
            f.write(json.dumps(ann.to_record()) + "\n")


def mask_path(mask_dir, image_id, part_id):
    return Path(mask_dir) / f"{image_id}_{part_id}.png"


def save_mask(path, mask):
    Image.fromarray(mask.raster.astype(np.uint8) * 255, mode="L").save(path)


def load_masks(mask_dir, image_id, image_size=None):
    """Load all masks present for ``image_id``; returns ``{part_id: PartMask}``.

    ``image_size`` is ``(width, height)``; when given, rasters of other sizes are
    rejected.
    """
    masks = {}
    for part in PART_NAMES:
        path = mask_path(mask_dir, image_id, part)
        if not path.exists():
            continue
        raster = np.asarray(Image.open(path).convert("L")) > 0
        if image_size is not None and raster.shape != (image_size[1], image_size[0]):
            raise ValueError(f"{path}: mask is {raster.shape[::-1]}, image is {tuple(image_size)}")
        masks[part] = PartMask(part, raster)
    return masks


def load_image(path):
    return np.asarray(Image.open(path).convert("RGB"))


def save_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


@dataclass(frozen=True)
class CropSpec:
    """Axis-aligned crop of ``source_box`` (padded to ``padded_box``) resized to the target.

    Boxes are ``(x0, y0, x1, y1)``. ``source_box`` is the enlarged, clamped box;
    ``padded_box`` extends it symmetrically to the target aspect ratio and may
    reach outside the image.
    """

    source_box: tuple
    padded_box: tuple
    target_width: int
    target_height: int

    @property
    def scale_x(self):
        return self.target_width / (self.padded_box[2] - self.padded_box[0])

    @property
    def scale_y(self):
        return self.target_height / (self.padded_box[3] - self.padded_box[1])

    @classmethod
    def identity(cls, width, height):
        box = (0.0, 0.0, float(width), float(height))
        return cls(box, box, int(width), int(height))

    def forward(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        origin = np.array(self.padded_box[:2])
        return (xy - origin) * np.array([self.scale_x, self.scale_y])

    def inverse(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        origin = np.array(self.padded_box[:2])
        return xy / np.array([self.scale_x, self.scale_y]) + origin


def apply_transform(point, spec, direction="forward"):
    if direction == "forward":
        x, y = spec.forward([point.x, point.y])
    elif direction == "inverse":
        x, y = spec.inverse([point.x, point.y])
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")
    return Keypoint(float(x), float(y), point.visible, point.score)


def crop_and_resize(annotation, image_size, target_size=PAPER_INPUT_SIZE, margin=CROP_MARGIN):
    """Crop rule: tightest box around the visible keypoints, grown by ``margin``
    of its width/height on every side, clamped to the image, then padded to the
    target aspect ratio.

    ``image_size`` and ``target_size`` are ``(width, height)``.
    """
    vis = annotation.visible()
    if vis.sum() < 2:
        raise DegenerateBoxError(f"{annotation.image_id}: fewer than 2 visible keypoints")
    xy = annotation.xy()[vis]
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 and h <= 0:
        raise DegenerateBoxError(f"{annotation.image_id}: keypoints coincide")
    x0, x1 = x0 - margin * w, x1 + margin * w
    y0, y1 = y0 - margin * h, y1 + margin * h
    width, height = image_size
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, float(width)), min(y1, float(height))
    bw, bh = x1 - x0, y1 - y0
    tw, th = target_size
    aspect = tw / th
    px0, py0, px1, py1 = x0, y0, x1, y1
    if bh <= 0 or bw / bh < aspect:
        extra = (bh * aspect - bw) / 2
        px0, px1 = x0 - extra, x1 + extra
    else:
        extra = (bw / aspect - bh) / 2
        py0, py1 = y0 - extra, y1 + extra
    return CropSpec(
        source_box=(float(x0), float(y0), float(x1), float(y1)),
        padded_box=(float(px0), float(py0), float(px1), float(py1)),
        target_width=int(tw),
        target_height=int(th),
    )


def crop_image(image, spec, order=1):
    """Resample ``image`` (H x W [x C]) into the crop's target raster; outside is 0."""
    image = np.asarray(image)
    cols = np.arange(spec.target_width) + 0.5
    rows = np.arange(spec.target_height) + 0.5
    gx, gy = np.meshgrid(cols, rows)
    src = spec.inverse(np.stack([gx, gy], axis=-1))
    # map_coordinates indexes pixel centres at integers
    coords = [src[..., 1] - 0.5, src[..., 0] - 0.5]
    if image.ndim == 2:
        return ndimage.map_coordinates(image.astype(np.float64), coords, order=order, cval=0.0)
    channels = [
        ndimage.map_coordinates(image[..., c].astype(np.float64), coords, order=order, cval=0.0)
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1)
