"""Pseudo labels from multi-view consensus.

A trained model is run on six views of each input crop (identity, mirror,
rotation by +-45 degrees, scaling by 0.65 and 1.35, all about the crop
centre). Detections are mapped back to image coordinates; their spread,
divided by the torso size, serves as the confidence. Selection keeps the
most consistent labels with the same count for every part.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .evaluate import image_rng
from .geometry import (
    DEFAULT_SEGMENTS,
    LIMB,
    ArbitraryKeypointSpec,
    limb_fraction,
    ski_beta,
)
from .metrics import UndefinedTorsoError, torso_size
from .transformer import decode_batch, predict_heatmaps

log = logging.getLogger(__name__)

MIN_SCORE = 0.25
MIN_VIEWS = 4
POOL_PER_IMAGE = 1000
VIEW_NAMES = ("identity", "hflip", "rot+45", "rot-45", "scale0.65", "scale1.35")


@dataclass(frozen=True)
class AugmentedView:
    """Affine map ``x_view = matrix @ x + offset`` on input-crop coordinates."""

    view_id: str
    matrix: np.ndarray
    offset: np.ndarray
    flip: bool = False

    def forward(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix.T + self.offset

    def inverse(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - self.offset) @ np.linalg.inv(self.matrix).T

    def query(self, spec):
        """The query to ask in this view for the same semantic point."""
        return spec.flipped() if self.flip else spec

    def warp(self, image):
        """Resample an ``(H, W[, C])`` image into this view; outside is 0."""
        image = np.asarray(image)
        h, w = image.shape[:2]
        gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        src = self.inverse(np.stack([gx, gy], axis=-1))
        coords = [src[..., 1] - 0.5, src[..., 0] - 0.5]
        planes = image[..., None] if image.ndim == 2 else image
        out = np.stack(
            [
                ndimage.map_coordinates(planes[..., c].astype(np.float64), coords, order=1, cval=0.0)
                for c in range(planes.shape[2])
            ],
            axis=-1,
        )
        out = out[..., 0] if image.ndim == 2 else out
        return np.clip(np.round(out), 0, 255).astype(image.dtype)


def make_view(view_id, width, height):
    c = np.array([width / 2.0, height / 2.0])
    if view_id == "identity":
        m = np.eye(2)
    elif view_id == "hflip":
        m = np.diag([-1.0, 1.0])
    elif view_id.startswith("rot"):
        a = math.radians(float(view_id[3:]))
        m = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    elif view_id.startswith("scale"):
        m = float(view_id[5:]) * np.eye(2)
    else:
        raise ValueError(f"unknown view {view_id!r}")
    return AugmentedView(view_id, m, c - m @ c, view_id == "hflip")


def augmented_views(width, height, names=VIEW_NAMES):
    return [make_view(n, width, height) for n in names]


def generate_views(image, annotation=None, names=VIEW_NAMES):
    """``[(view image, AugmentedView)]`` for an input crop."""
    h, w = np.asarray(image).shape[:2]
    return [(v.warp(image), v) for v in augmented_views(w, h, names)]


@dataclass(frozen=True)
class PseudoLabel:
    image_id: str
    label_id: int
    spec: ArbitraryKeypointSpec
    point: np.ndarray
    std_conf: float
    support: int

    def to_record(self):
        return {
            "image_id": self.image_id,
            "label_id": self.label_id,
            **self.spec.to_record(),
            "x": float(self.point[0]),
            "y": float(self.point[1]),
            "std_conf": float(self.std_conf),
            "support": int(self.support),
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            rec["image_id"], int(rec["label_id"]), ArbitraryKeypointSpec.from_record(rec),
            np.array([rec["x"], rec["y"]], dtype=np.float64), float(rec["std_conf"]),
            int(rec["support"]),
        )


@dataclass(frozen=True)
class Rejection:
    reason: str


def consensus(points, scores, views, torso, min_score=MIN_SCORE, min_views=MIN_VIEWS, to_image=None):
    """Combine per-view detections of one query.

    ``points[i]`` is the detection in view ``i``'s frame. ``to_image`` maps
    input-crop coordinates to image coordinates (identity if omitted).
    Returns ``(point, std_conf, support)`` or a :class:`Rejection`.
    """
    if not views:
        raise ValueError("need at least one view")
    if not torso or not math.isfinite(torso) or torso <= 0:
        return Rejection("degenerate torso")
    keep = [i for i, s in enumerate(scores) if s >= min_score]
    if len(keep) < min_views:
        return Rejection("too few views")
    back = {}
    for i in keep:
        q = views[i].inverse(np.asarray(points[i], dtype=np.float64))
        back[i] = to_image(q) if to_image else q
    ident = [i for i in keep if views[i].view_id == "identity"]
    if not ident:
        return Rejection("identity view below score")
    pts = np.array(list(back.values()))
    std = math.sqrt(float(pts[:, 0].var() + pts[:, 1].var())) / torso
    return back[ident[0]], std, len(keep)


def random_specs(annotation, count, rng, table=DEFAULT_SEGMENTS):
    """Arbitrary-keypoint queries on segments whose keypoints are visible."""
    vis = annotation.visible()
    segs = [s for s in table if vis[s.k_i] and vis[s.k_j]]
    specs = []
    for _ in range(count if segs else 0):
        seg = segs[rng.integers(len(segs))]
        alpha = float(rng.random())
        if seg.kind == LIMB:
            side = "c1" if rng.random() < 0.5 else "c2"
            specs.append(ArbitraryKeypointSpec.limb(seg.segment_id, alpha, side, 1.0 - limb_fraction(rng.random())))
        else:
            specs.append(ArbitraryKeypointSpec.ski(seg.segment_id, alpha, ski_beta(rng.random())))
    return specs


def label_sample(model, sample, specs, min_score=MIN_SCORE, min_views=MIN_VIEWS, start_id=0):
    """Pseudo labels for one sample; returns ``(labels, rejection counts)``."""
    rejected = defaultdict(int)
    try:
        torso = torso_size(sample.annotation)
    except UndefinedTorsoError:
        rejected["degenerate torso"] += len(specs)
        return [], dict(rejected)
    per_view = []
    views = generate_views(sample.input_image)
    for img, view in views:
        hms = predict_heatmaps(model, img, [view.query(s) for s in specs])
        pts, scores = decode_batch(hms, model.config)
        per_view.append((pts, scores))
    labels = []
    vs = [v for _, v in views]
    for k, spec in enumerate(specs):
        out = consensus(
            [pv[0][k] for pv in per_view], [pv[1][k] for pv in per_view], vs, torso,
            min_score, min_views, sample.crop.inverse,
        )
        if isinstance(out, Rejection):
            rejected[out.reason] += 1
            continue
        point, std, support = out
        labels.append(PseudoLabel(sample.image_id, start_id + k, spec, point, std, support))
    return labels, dict(rejected)


def build_pool(model, samples, per_image=POOL_PER_IMAGE, seed=0, min_score=MIN_SCORE, min_views=MIN_VIEWS):
    """Pseudo labels for every sample, in sample order."""
    pool, rejected = [], defaultdict(int)
    for sample in samples:
        specs = random_specs(sample.annotation, per_image, image_rng(seed, sample.image_id))
        start = len(pool) + sum(rejected.values())
        labels, rej = label_sample(model, sample, specs, min_score, min_views, start)
        pool += labels
        for k, v in rej.items():
            rejected[k] += v
    log.info("pool: %d labels, rejected %s", len(pool), dict(rejected))
    return pool, dict(rejected)


@dataclass
class Selection:
    selected: list
    rejected: list
    per_part: dict = field(default_factory=dict)
    imbalance: dict = field(default_factory=dict)


def select_balanced(pool, keep_fraction):
    """Keep the same number of lowest-spread labels for every part.

    ``q = floor(keep_fraction * total / parts)``; a part with fewer than ``q``
    labels keeps all of them and is listed in ``imbalance``.
    """
    pool = list(pool)
    if not pool:
        raise ValueError("empty pseudo-label pool")
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    groups = defaultdict(list)
    for lab in pool:
        groups[lab.spec.part_id].append(lab)
    q = math.floor(keep_fraction * len(pool) / len(groups))
    selected, rejected, per_part, imbalance = [], [], {}, {}
    for part in sorted(groups):
        ranked = sorted(groups[part], key=lambda lab: (lab.std_conf, lab.image_id, lab.label_id))
        if len(ranked) < q:
            imbalance[part] = {"wanted": q, "available": len(ranked)}
        selected += ranked[:q]
        rejected += ranked[q:]
        per_part[part] = min(q, len(ranked))
    if imbalance:
        log.warning("pseudo-label parts below quota: %s", imbalance)
    return Selection(selected, rejected, per_part, imbalance)


def write_pseudo_labels(path, labels):
    with open(path, "w") as f:
        for lab in labels:
            f.write(json.dumps(lab.to_record()) + "\n")


def read_pseudo_labels(path):
    with open(path) as f:
        return [PseudoLabel.from_record(json.loads(line)) for line in f if line.strip()]
