"""Ground truth for arbitrary keypoints on limbs and skis.

A segment joins two keypoints ``k_i`` and ``k_j``. The projection point for a
fraction ``alpha`` is ``p = alpha * k_i + (1 - alpha) * k_j``. The line through
``p`` orthogonal to the segment is intersected with the part mask; ``c1`` is the
run endpoint in the direction ``o = (-d_y, d_x)`` with ``d = k_j - k_i`` and
``c2`` the endpoint on the other side.

Mask runs along the orthogonal line are found by exact grid traversal: the
line is split at every pixel edge it crosses and each piece is classified by
the pixel containing its midpoint. Run endpoints are pulled inside the run by
``EDGE_INSET`` so that they belong to the mask themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import KEYPOINT_INDEX, KEYPOINT_NAMES, NUM_KEYPOINTS, swap_lr

EDGE_INSET = 1e-4
MIN_RUN_LENGTH = 0.5  # px; shorter runs are pixel-corner clips

LIMB = "limb"
SKI = "ski"
STANDARD = "standard"
PROJECTION = "projection"
KINDS = (LIMB, SKI, STANDARD, PROJECTION)
SIDES = ("c1", "c2", "none")


class GeometryError(ValueError):
    pass


class NoIntersectionError(GeometryError):
    """The orthogonal line through ``p`` has no usable mask run."""


class PreconditionError(GeometryError):
    pass


class DegenerateSegmentError(GeometryError):
    pass


@dataclass(frozen=True)
class Segment:
    segment_id: str
    part_id: str
    k_i: int
    k_j: int
    kind: str


class SegmentTable:
    """Limb and ski segments; ``segment_id`` equals the part id of its mask."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        ids = [e.segment_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("segment ids must be unique")
        for e in self.entries:
            if not (0 <= e.k_i < NUM_KEYPOINTS and 0 <= e.k_j < NUM_KEYPOINTS) or e.k_i == e.k_j:
                raise ValueError(f"bad keypoint slots in {e}")
            if e.kind not in (LIMB, SKI):
                raise ValueError(f"bad segment kind in {e}")
        self._by_id = {e.segment_id: e for e in self.entries}
        self._by_pair = {frozenset((e.k_i, e.k_j)): e for e in self.entries}

    def __getitem__(self, segment_id):
        try:
            return self._by_id[segment_id]
        except KeyError:
            raise KeyError(f"unknown segment {segment_id!r}") from None

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return tuple(e.segment_id for e in self.entries)

    def by_pair(self, a, b):
        return self._by_pair.get(frozenset((a, b)))

    def with_slot(self, slot):
        """Segments that use ``slot`` as ``k_i`` first, then as ``k_j``, in table order."""
        first = [e for e in self.entries if e.k_i == slot]
        second = [e for e in self.entries if e.k_j == slot]
        return first + second


def _segment(name, start, end, kind=LIMB):
    return Segment(name, name, KEYPOINT_INDEX[start], KEYPOINT_INDEX[end], kind)


DEFAULT_SEGMENTS = SegmentTable(
    [
        _segment(f"{s}_{part}", f"{s}_{a}", f"{s}_{b}", kind)
        for part, a, b, kind in (
            ("upper_arm", "shoulder", "elbow", LIMB),
            ("forearm", "elbow", "wrist", LIMB),
            ("thigh", "hip", "knee", LIMB),
            ("lower_leg", "knee", "ankle", LIMB),
            ("ski", "ski_tip", "ski_tail", SKI),
        )
        for s in ("l", "r")
    ]
)


@dataclass(frozen=True)
class ArbitraryKeypointSpec:
    """Semantic meaning of one keypoint query.

    ``standard`` specs name a keypoint slot and ignore the segment fields.
    ``projection`` specs denote ``p`` itself and need no mask.
    """

    kind: str
    segment_id: str | None = None
    alpha: float = 1.0
    side: str = "none"
    beta: float = 1.0
    keypoint: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"alpha/beta outside [0, 1]: {self.alpha}, {self.beta}")
        if self.kind == LIMB and self.side == "none":
            raise ValueError("limb specs need side c1 or c2")
        if self.kind in (SKI, PROJECTION, STANDARD) and self.side != "none":
            raise ValueError(f"{self.kind} specs have no side")
        if self.kind == STANDARD:
            if self.keypoint not in KEYPOINT_INDEX:
                raise ValueError(f"unknown keypoint {self.keypoint!r}")
            if self.alpha not in (0.0, 1.0) or self.beta != 1.0:
                raise ValueError("standard specs need alpha in {0, 1} and beta = 1")
        elif self.segment_id is None:
            raise ValueError(f"{self.kind} specs need a segment")

    @classmethod
    def standard(cls, keypoint):
        if isinstance(keypoint, int):
            keypoint = KEYPOINT_NAMES[keypoint]
        return cls(STANDARD, keypoint=keypoint)

    @classmethod
    def limb(cls, segment_id, alpha, side, beta):
        return cls(LIMB, segment_id, float(alpha), side, float(beta))

    @classmethod
    def ski(cls, segment_id, alpha, beta):
        return cls(SKI, segment_id, float(alpha), "none", float(beta))

    @classmethod
    def projection(cls, segment_id, alpha):
        return cls(PROJECTION, segment_id, float(alpha))

    @property
    def part_id(self):
        return self.keypoint if self.kind == STANDARD else self.segment_id

    def flipped(self):
        """The same semantic query on a horizontally mirrored image."""
        if self.kind == STANDARD:
            return ArbitraryKeypointSpec.standard(swap_lr(self.keypoint))
        seg = swap_lr(self.segment_id)
        if self.kind == LIMB:
            return ArbitraryKeypointSpec.limb(
                seg, self.alpha, "c2" if self.side == "c1" else "c1", self.beta
            )
        if self.kind == SKI:
            return ArbitraryKeypointSpec.ski(seg, self.alpha, 1.0 - self.beta)
        return ArbitraryKeypointSpec.projection(seg, self.alpha)

    def to_record(self):
        return {
            "kind": self.kind,
            "segment": self.segment_id,
            "keypoint": self.keypoint,
            "alpha": self.alpha,
            "side": self.side,
            "beta": self.beta,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            kind=rec["kind"],
            segment_id=rec.get("segment"),
            alpha=float(rec.get("alpha", 1.0)),
            side=rec.get("side", "none"),
            beta=float(rec.get("beta", 1.0)),
            keypoint=rec.get("keypoint"),
        )


@dataclass(frozen=True)
class ProjectionGeometry:
    """``p``, the intersection points and the unit normal ``o`` of one segment.

    ``t1``/``t2`` are the signed offsets of ``c1``/``c2`` from ``p`` along ``o``.
    """

    p: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    alpha: float
    segment_id: str
    normal: np.ndarray
    t1: float
    t2: float

    @classmethod
    def from_points(cls, p, c1, c2, alpha=0.5, segment_id=""):
        """Build from explicit points; ``o`` is taken along ``c2 -> c1``."""
        p, c1, c2 = (np.asarray(v, dtype=np.float64) for v in (p, c1, c2))
        o = c1 - c2
        o = o / np.linalg.norm(o)
        return cls(p, c1, c2, alpha, segment_id, o, float((c1 - p) @ o), float((c2 - p) @ o))


def _segment_endpoints(annotation, seg):
    ki, kj = annotation.keypoints[seg.k_i], annotation.keypoints[seg.k_j]
    if not (ki.visible and kj.visible):
        raise PreconditionError(f"{seg.segment_id}: enclosing keypoints not both visible")
    a = np.array([ki.x, ki.y], dtype=np.float64)
    b = np.array([kj.x, kj.y], dtype=np.float64)
    return a, b


def segment_normal(k_i, k_j):
    d = np.asarray(k_j, dtype=np.float64) - np.asarray(k_i, dtype=np.float64)
    norm = math.hypot(d[0], d[1])
    if norm < 1e-9:
        raise DegenerateSegmentError("segment endpoints coincide")
    return np.array([-d[1], d[0]]) / norm


def _mask_bbox(raster):
    rows = np.flatnonzero(raster.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(raster.any(axis=0))
    return cols[0], rows[0], cols[-1] + 1, rows[-1] + 1


def line_runs(raster, origin, direction, bbox=None):
    """Maximal interior intervals ``(t0, t1)`` of ``origin + t * direction``.

    ``direction`` must be a unit vector. Runs are sorted by ``t0``.
    """
    if bbox is None:
        bbox = _mask_bbox(raster)
        if bbox is None:
            return []
    x0, y0, x1, y1 = bbox
    ox, oy = float(origin[0]), float(origin[1])
    dx, dy = float(direction[0]), float(direction[1])
    tmin, tmax = -math.inf, math.inf
    for o, d, lo, hi in ((ox, dx, x0, x1), (oy, dy, y0, y1)):
        if abs(d) < 1e-12:
            if not lo <= o <= hi:
                return []
            continue
        ta, tb = (lo - o) / d, (hi - o) / d
        if ta > tb:
            ta, tb = tb, ta
        tmin, tmax = max(tmin, ta), min(tmax, tb)
    if tmax - tmin <= 0:
        return []
    cuts = [np.array([tmin, tmax])]
    for o, d, lo, hi in ((ox, dx, x0, x1), (oy, dy, y0, y1)):
        if abs(d) < 1e-12:
            continue
        ks = np.arange(lo + 1, hi)
        cuts.append((ks - o) / d)
    t = np.concatenate(cuts)
    t = np.unique(t[(t >= tmin) & (t <= tmax)])
    if t.size < 2:
        return []
    mid = 0.5 * (t[:-1] + t[1:])
    cols = np.floor(ox + mid * dx).astype(np.int64)
    rows = np.floor(oy + mid * dy).astype(np.int64)
    h, w = raster.shape
    ok = (cols >= 0) & (rows >= 0) & (cols < w) & (rows < h)
    inside = np.zeros(mid.shape, dtype=bool)
    inside[ok] = raster[rows[ok], cols[ok]]
    if not inside.any():
        return []
    edges = np.diff(np.concatenate([[0], inside.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(float(t[s]), float(t[e])) for s, e in zip(starts, ends)]


def _pick_run(runs, kind):
    runs = [r for r in runs if r[1] - r[0] > MIN_RUN_LENGTH]
    if not runs:
        return None
    if kind == LIMB:
        for r in runs:
            if r[0] <= 0.0 <= r[1]:
                return r
        return None
    return min(runs, key=lambda r: (abs(0.5 * (r[0] + r[1])), r[0]))


class _BBoxCache:
    """Per-raster bounding boxes, keyed by object identity."""

    def __init__(self):
        self._cache = {}

    def get(self, raster):
        key = id(raster)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is raster:
            return hit[1]
        bbox = _mask_bbox(raster)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = (raster, bbox)
        return bbox


_bboxes = _BBoxCache()


def compute_projection_geometry(annotation, masks, segment_id, alpha, table=DEFAULT_SEGMENTS):
    seg = table[segment_id]
    k_i, k_j = _segment_endpoints(annotation, seg)
    o = segment_normal(k_i, k_j)
    alpha = float(alpha)
    p = alpha * k_i + (1.0 - alpha) * k_j
    mask = masks.get(seg.part_id) if masks else None
    if mask is None:
        raise PreconditionError(f"{segment_id}: no mask for part {seg.part_id}")
    bbox = _bboxes.get(mask.raster)
    if bbox is None:
        raise PreconditionError(f"{segment_id}: mask is empty")
    run = _pick_run(line_runs(mask.raster, p, o, bbox), seg.kind)
    if run is None:
        raise NoIntersectionError(f"{segment_id}: no mask run at alpha={alpha:.4f}")
    t2, t1 = run[0] + EDGE_INSET, run[1] - EDGE_INSET
    return ProjectionGeometry(
        p=p, c1=p + t1 * o, c2=p + t2 * o, alpha=alpha, segment_id=segment_id,
        normal=o, t1=t1, t2=t2,
    )


def limb_fraction(u):
    """Fraction of the way from ``p`` to the chosen intersection point; dense near it."""
    return math.sqrt(u)


def ski_beta(u):
    """Arcsine-distributed ``beta`` for ``u ~ U(0, 1)``; mass piles up near c1 and c2."""
    return math.sin(0.5 * math.pi * u) ** 2


def place_keypoint(geometry, kind, u, side="c1"):
    """Deterministic part of the sampler, given the uniform draw ``u`` and side."""
    if kind == LIMB:
        f = limb_fraction(u)
        beta = 1.0 - f
        c = geometry.c1 if side == "c1" else geometry.c2
        spec = ArbitraryKeypointSpec.limb(geometry.segment_id, geometry.alpha, side, beta)
        return spec, beta * geometry.p + (1.0 - beta) * c
    if kind == SKI:
        beta = ski_beta(u)
        spec = ArbitraryKeypointSpec.ski(geometry.segment_id, geometry.alpha, beta)
        return spec, beta * geometry.c1 + (1.0 - beta) * geometry.c2
    raise ValueError(f"cannot sample kind {kind!r}")


def sample_arbitrary_keypoint(geometry, kind, rng):
    if kind == LIMB:
        side = "c1" if rng.random() < 0.5 else "c2"
        return place_keypoint(geometry, kind, rng.random(), side)
    return place_keypoint(geometry, kind, rng.random())


def available_segments(annotation, masks, table=DEFAULT_SEGMENTS):
    """Segments with both keypoints visible and a nonempty mask."""
    out = []
    vis = annotation.visible()
    for seg in table:
        mask = masks.get(seg.part_id) if masks else None
        if vis[seg.k_i] and vis[seg.k_j] and mask is not None and _bboxes.get(mask.raster) is not None:
            out.append(seg.segment_id)
    return out


def sample_gt_keypoints(annotation, masks, count, rng, table=DEFAULT_SEGMENTS, max_tries=50):
    """Draw ``count`` (spec, point) pairs on random segments with uniform ``alpha``.

    ``alpha`` is redrawn when the orthogonal line misses the mask. Returns fewer
    pairs only when no segment is usable.
    """
    segments = available_segments(annotation, masks, table)
    out = []
    if not segments:
        return out
    failures = 0
    while len(out) < count:
        seg_id = segments[rng.integers(len(segments))]
        alpha = rng.random()
        try:
            geom = compute_projection_geometry(annotation, masks, seg_id, alpha, table)
        except NoIntersectionError:
            failures += 1
            if failures > max_tries * count:
                break
            continue
        out.append(sample_arbitrary_keypoint(geom, table[seg_id].kind, rng))
    return out


def projection_point(annotation, segment_id, alpha, table=DEFAULT_SEGMENTS):
    k_i, k_j = _segment_endpoints(annotation, table[segment_id])
    return alpha * k_i + (1.0 - alpha) * k_j


def spec_to_point(annotation, masks, spec, table=DEFAULT_SEGMENTS):
    if spec.kind == STANDARD:
        kp = annotation[spec.keypoint]
        if not kp.visible:
            raise PreconditionError(f"{spec.keypoint} is not visible")
        return np.array([kp.x, kp.y], dtype=np.float64)
    if spec.kind == PROJECTION:
        return projection_point(annotation, spec.segment_id, spec.alpha, table)
    geom = compute_projection_geometry(annotation, masks, spec.segment_id, spec.alpha, table)
    return point_from_geometry(geom, spec)


def point_from_geometry(geom, spec):
    if spec.kind == LIMB:
        c = geom.c1 if spec.side == "c1" else geom.c2
        return spec.beta * geom.p + (1.0 - spec.beta) * c
    if spec.kind == SKI:
        return spec.beta * geom.c1 + (1.0 - spec.beta) * geom.c2
    if spec.kind == PROJECTION:
        return geom.p.copy()
    raise ValueError(f"{spec.kind} specs are not defined by projection geometry")


def segment_alpha(k_i, k_j, point):
    """``alpha`` of the orthogonal foot of ``point`` on the line ``k_j -> k_i``."""
    k_i, k_j = np.asarray(k_i, dtype=np.float64), np.asarray(k_j, dtype=np.float64)
    d = k_i - k_j
    den = float(d @ d)
    if den < 1e-18:
        raise DegenerateSegmentError("segment endpoints coincide")
    return float((np.asarray(point, dtype=np.float64) - k_j) @ d / den)


def point_to_spec(annotation, masks, segment_id, point, table=DEFAULT_SEGMENTS, tol=1e-6):
    """Invert :func:`spec_to_point`; returns ``(spec, out_of_mask)``.

    ``out_of_mask`` is set when the point lies outside the mask run used for
    the geometry; ``beta`` is then clamped to ``[0, 1]``.
    """
    seg = table[segment_id]
    k_i, k_j = _segment_endpoints(annotation, seg)
    alpha = segment_alpha(k_i, k_j, point)
    if not -tol <= alpha <= 1.0 + tol:
        raise PreconditionError(f"{segment_id}: foot of point outside the segment (alpha={alpha:.4f})")
    alpha = min(max(alpha, 0.0), 1.0)
    geom = compute_projection_geometry(annotation, masks, segment_id, alpha, table)
    point = np.asarray(point, dtype=np.float64)
    if seg.kind == LIMB:
        s = float((point - geom.p) @ geom.normal)
        side = "c1" if s >= 0 else "c2"
        reach = geom.t1 if side == "c1" else -geom.t2
        out = abs(s) > reach + tol
        beta = 1.0 - abs(s) / reach if reach > 0 else 0.0
        return ArbitraryKeypointSpec.limb(segment_id, alpha, side, min(max(beta, 0.0), 1.0)), out
    chord = geom.c1 - geom.c2
    beta = float((point - geom.c2) @ chord / (chord @ chord))
    out = not -tol <= beta <= 1.0 + tol
    return ArbitraryKeypointSpec.ski(segment_id, alpha, min(max(beta, 0.0), 1.0)), out
