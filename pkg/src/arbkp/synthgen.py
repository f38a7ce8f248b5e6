"""Synthetic articulated figures with skis.

Each figure comes with exact keypoints and exact part masks. Limbs are
capsules around their keypoint segment; skis are two rectangles meeting at a
bend, so the straight tip-tail chord leaves the ski mask in the middle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .datamodel import KEYPOINT_INDEX, NUM_KEYPOINTS, PartMask, PoseAnnotation

PAINT_ORDER = (
    "l_ski", "r_ski", "l_foot", "r_foot", "l_lower_leg", "r_lower_leg", "l_thigh", "r_thigh",
    "torso", "head", "l_upper_arm", "r_upper_arm", "l_forearm", "r_forearm", "l_hand", "r_hand",
)

PART_COLORS = {
    "head": (230, 190, 150),
    "torso": (150, 150, 160),
    "l_upper_arm": (220, 60, 50),
    "l_forearm": (250, 120, 60),
    "l_hand": (250, 190, 120),
    "r_upper_arm": (50, 80, 220),
    "r_forearm": (60, 160, 240),
    "r_hand": (140, 210, 250),
    "l_thigh": (180, 40, 90),
    "l_lower_leg": (230, 90, 150),
    "l_foot": (120, 30, 60),
    "r_thigh": (40, 140, 90),
    "r_lower_leg": (90, 210, 120),
    "r_foot": (30, 90, 60),
    "l_ski": (240, 220, 40),
    "r_ski": (170, 90, 230),
}


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class FigureConfig:
    """Parameters of one synthetic figure. Lengths in pixels, angles in radians."""

    seed: int = 0
    width: int = 192
    height: int = 224
    limb_thickness: tuple = (20.0, 26.0)
    torso_length: tuple = (44.0, 52.0)
    torso_width: tuple = (30.0, 36.0)
    upper_arm_length: tuple = (28.0, 36.0)
    forearm_length: tuple = (26.0, 32.0)
    thigh_length: tuple = (34.0, 42.0)
    lower_leg_length: tuple = (32.0, 40.0)
    head_radius: tuple = (10.0, 13.0)
    ski_length: tuple = (60.0, 76.0)
    ski_width: tuple = (14.0, 18.0)
    ski_bend: tuple = (0.65, 0.9)
    torso_angle: tuple = (-0.35, 0.35)
    arm_angle: tuple = (0.3, 1.2)
    elbow_angle: tuple = (-0.6, 0.6)
    leg_angle: tuple = (0.05, 0.45)
    knee_angle: tuple = (-0.5, 0.5)
    ski_angle: tuple = (-0.4, 0.4)
    margin: float = 4.0
    mask_morph_radius: int = 0
    mask_dropout: float = 0.0
    background_noise: float = 12.0
    image_id: str | None = None

    def __post_init__(self):
        if self.limb_thickness[0] < 2:
            raise ValueError("limb thickness must be at least 2 px")
        if not 0.0 <= self.mask_dropout <= 1.0:
            raise ValueError("mask_dropout must lie in [0, 1]")

    def with_seed(self, seed, image_id=None):
        return replace(self, seed=seed, image_id=image_id)


def _unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def _pixel_centers(width, height):
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    return np.meshgrid(xs, ys)


def segment_distance(gx, gy, a, b):
    d = b - a
    den = float(d @ d)
    t = ((gx - a[0]) * d[0] + (gy - a[1]) * d[1]) / den if den > 0 else np.zeros_like(gx)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(gx - (a[0] + t * d[0]), gy - (a[1] + t * d[1]))


def capsule(grid, a, b, radius):
    gx, gy = grid
    return segment_distance(gx, gy, a, b) <= radius


def rectangle(grid, a, b, half_width):
    """Oriented rectangle spanning ``a -> b`` with the given half width."""
    gx, gy = grid
    d = b - a
    length = float(np.hypot(*d))
    u = d / length
    rx, ry = gx - a[0], gy - a[1]
    along = rx * u[0] + ry * u[1]
    across = -rx * u[1] + ry * u[0]
    return (along >= 0) & (along <= length) & (np.abs(across) <= half_width)


def disk(grid, c, radius):
    gx, gy = grid
    return np.hypot(gx - c[0], gy - c[1]) <= radius


def convex_polygon(grid, vertices):
    gx, gy = grid
    v = np.asarray(vertices, dtype=np.float64)
    signs = []
    for k in range(len(v)):
        a, b = v[k], v[(k + 1) % len(v)]
        signs.append((b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0]))
    s = np.stack(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def ski_kink(tip, tail, bend):
    """Bend vertex of a ski: chord midpoint pushed sideways so the two halves
    meet at interior angle ``pi - bend``."""
    mid = 0.5 * (tip + tail)
    d = tail - tip
    half = 0.5 * float(np.hypot(*d))
    normal = np.array([-d[1], d[0]]) / (2 * half)
    # skis curve towards -normal (upwards for a tip-to-tail direction pointing right)
    return mid - normal * half * math.tan(0.5 * bend)


def _skeleton(rng, cfg):
    """Keypoints in a local frame around the hip centre, plus shape parameters."""
    u = lambda lo_hi: rng.uniform(*lo_hi)  # noqa: E731
    kp = np.zeros((NUM_KEYPOINTS, 2))
    torso_up = -0.5 * math.pi + u(cfg.torso_angle)
    up = _unit(torso_up)
    side = np.array([-up[1], up[0]])  # figure's left is +side
    torso_len, torso_w = u(cfg.torso_length), u(cfg.torso_width)
    hip_c = np.zeros(2)
    neck = hip_c + torso_len * up
    head_r = u(cfg.head_radius)
    head = neck + (head_r + 2.0) * up
    idx = KEYPOINT_INDEX
    kp[idx["head"]] = head
    shapes = {"head_radius": head_r, "thickness": {}, "ski": {}}
    for s, sign in (("l", 1.0), ("r", -1.0)):
        shoulder = neck + sign * 0.5 * torso_w * side
        hip = hip_c + sign * 0.38 * torso_w * side
        arm = torso_up + math.pi - sign * u(cfg.arm_angle)
        elbow = shoulder + u(cfg.upper_arm_length) * _unit(arm)
        wrist = elbow + u(cfg.forearm_length) * _unit(arm - sign * u(cfg.elbow_angle))
        leg = torso_up + math.pi - sign * u(cfg.leg_angle)
        knee = hip + u(cfg.thigh_length) * _unit(leg)
        ankle = knee + u(cfg.lower_leg_length) * _unit(leg + u(cfg.knee_angle))
        ski_dir = _unit(u(cfg.ski_angle))
        ski_len = u(cfg.ski_length)
        tip = ankle + 0.55 * ski_len * ski_dir
        tail = ankle - 0.45 * ski_len * ski_dir
        for name, pt in (
            ("shoulder", shoulder), ("elbow", elbow), ("wrist", wrist), ("hip", hip),
            ("knee", knee), ("ankle", ankle), ("ski_tip", tip), ("ski_tail", tail),
        ):
            kp[idx[f"{s}_{name}"]] = pt
        for part in ("upper_arm", "forearm", "thigh", "lower_leg"):
            shapes["thickness"][f"{s}_{part}"] = u(cfg.limb_thickness)
        shapes["ski"][f"{s}_ski"] = (u(cfg.ski_width), u(cfg.ski_bend))
    return kp, shapes


LIMB_ENDS = {
    "upper_arm": ("shoulder", "elbow"),
    "forearm": ("elbow", "wrist"),
    "thigh": ("hip", "knee"),
    "lower_leg": ("knee", "ankle"),
}


def _part_rasters(kp, shapes, width, height):
    grid = _pixel_centers(width, height)
    idx = KEYPOINT_INDEX
    at = lambda name: kp[idx[name]]  # noqa: E731
    rasters = {"head": disk(grid, at("head"), shapes["head_radius"])}
    rasters["torso"] = convex_polygon(
        grid, [at("l_shoulder"), at("r_shoulder"), at("r_hip"), at("l_hip")]
    )
    for s in ("l", "r"):
        for part, (a, b) in LIMB_ENDS.items():
            name = f"{s}_{part}"
            rasters[name] = capsule(grid, at(f"{s}_{a}"), at(f"{s}_{b}"), 0.5 * shapes["thickness"][name])
        fore = at(f"{s}_wrist") - at(f"{s}_elbow")
        hand_r = 0.3 * shapes["thickness"][f"{s}_forearm"] + 2.0
        rasters[f"{s}_hand"] = disk(grid, at(f"{s}_wrist") + fore / np.hypot(*fore) * hand_r, hand_r)
        tip, tail = at(f"{s}_ski_tip"), at(f"{s}_ski_tail")
        foot_r = 0.25 * shapes["thickness"][f"{s}_lower_leg"] + 1.5
        toward_tip = (tip - tail) / np.hypot(*(tip - tail))
        ankle = at(f"{s}_ankle")
        rasters[f"{s}_foot"] = capsule(grid, ankle, ankle + 2.5 * foot_r * toward_tip, foot_r)
        ski_w, bend = shapes["ski"][f"{s}_ski"]
        kink = ski_kink(tip, tail, bend)
        rasters[f"{s}_ski"] = (
            rectangle(grid, tip, kink, 0.5 * ski_w)
            | rectangle(grid, kink, tail, 0.5 * ski_w)
            | disk(grid, kink, 0.5 * ski_w)
        )
    return rasters


def _extent(kp, shapes):
    reach = max(max(shapes["thickness"].values()), shapes["head_radius"] * 2, 16.0)
    lo = kp.min(axis=0) - reach
    hi = kp.max(axis=0) + reach
    return lo, hi


def _background(rng, width, height, noise):
    base = rng.uniform(40, 110, size=3)
    coarse = rng.normal(0.0, noise, size=(height // 8 + 2, width // 8 + 2, 3))
    texture = ndimage.zoom(coarse, (8, 8, 1), order=1)[:height, :width]
    ramp = np.linspace(-15, 15, height)[:, None, None] * rng.choice([-1.0, 1.0])
    fine = rng.normal(0.0, noise / 3, size=(height, width, 3))
    return base + texture + ramp + fine


def _morph(raster, radius):
    if radius == 0:
        return raster
    r = abs(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    structure = xx**2 + yy**2 <= r * r
    if radius > 0:
        return ndimage.binary_dilation(raster, structure)
    return ndimage.binary_erosion(raster, structure)


def generate_figure(config):
    """Render one figure; returns ``(image, PoseAnnotation, [PartMask, ...])``.

    The image is ``height x width x 3`` uint8. Masks are exact unless the noise
    options are set, in which case the annotation stays exact and only the
    masks are perturbed.
    """
    rng = np.random.default_rng(config.seed)
    kp, shapes = _skeleton(rng, config)
    lo, hi = _extent(kp, shapes)
    size = hi - lo
    room = np.array([config.width, config.height]) - 2 * config.margin - size
    if np.any(room < 0):
        raise GenerationError(
            f"figure of extent {size.round(1).tolist()} does not fit a "
            f"{config.width}x{config.height} image"
        )
    shift = config.margin - lo + rng.uniform(0.0, 1.0, size=2) * room
    kp = kp + shift
    rasters = _part_rasters(kp, shapes, config.width, config.height)

    image = _background(rng, config.width, config.height, config.background_noise)
    shade = rng.uniform(0.8, 1.15)
    for part in PAINT_ORDER:
        color = np.array(PART_COLORS[part]) * shade
        image[rasters[part]] = color
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)

    image_id = config.image_id or f"synth_{config.seed:06d}"
    annotation = PoseAnnotation.from_arrays(image_id, kp)
    masks = []
    for part in PAINT_ORDER:
        if config.mask_dropout > 0 and rng.random() < config.mask_dropout:
            continue
        masks.append(PartMask(part, _morph(rasters[part], config.mask_morph_radius)))
    masks.sort(key=lambda m: m.part_id)
    return image, annotation, masks


def figure_shapes(config):
    """Per-part thickness / ski (width, bend) drawn for ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    _, shapes = _skeleton(rng, config)
    return shapes
