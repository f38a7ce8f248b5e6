"""PCK, thickness errors, MTE and PCT."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import KEYPOINT_INDEX

MAX_THICKNESS_ERROR = 2.0
PCK_THRESHOLD = 0.1
PCT_THRESHOLD = 0.2


class UndefinedTorsoError(ValueError):
    pass


class EmptyReportError(ValueError):
    pass


def torso_size(annotation):
    """Distance between right shoulder and left hip."""
    rs = annotation[KEYPOINT_INDEX["r_shoulder"]]
    lh = annotation[KEYPOINT_INDEX["l_hip"]]
    if not (rs.visible and lh.visible):
        raise UndefinedTorsoError(f"{annotation.image_id}: torso joints not visible")
    size = math.hypot(rs.x - lh.x, rs.y - lh.y)
    if size <= 0:
        raise UndefinedTorsoError(f"{annotation.image_id}: degenerate torso")
    return size


def pck(detections, ground_truth, torso, threshold=PCK_THRESHOLD):
    """Fraction of detections within ``threshold * torso`` of their ground truth.

    ``torso`` is a size in pixels or an annotation.
    """
    if not isinstance(torso, (int, float, np.floating)):
        torso = torso_size(torso)
    if torso <= 0:
        raise UndefinedTorsoError("degenerate torso")
    d = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if len(d) == 0:
        raise EmptyReportError("no detections")
    dist = np.linalg.norm(d - g, axis=1)
    dist = np.where(np.isfinite(dist), dist, np.inf)
    return float(np.mean(dist <= threshold * torso))


@dataclass(frozen=True)
class ThicknessEval:
    t_g: float
    t_d: float
    e: float
    out_of_mask: bool = False


def _outside(mask, d):
    return mask is not None and not bool(mask.contains(np.asarray(d, dtype=np.float64)))


def thickness_eval_limb(gt, det, geometry, mask=None):
    """Limb thickness error; sides are chosen by the intersection point closest
    to each point, and a detection on the other side adds its own thickness to
    the desired one."""
    g = np.asarray(gt, dtype=np.float64)
    d = np.asarray(det, dtype=np.float64)
    p, c1, c2 = geometry.p, geometry.c1, geometry.c2
    c_g = c1 if np.linalg.norm(g - c1) <= np.linalg.norm(g - c2) else c2
    t_g = float(np.linalg.norm(p - g) / np.linalg.norm(p - c_g))
    if _outside(mask, d) or not np.all(np.isfinite(d)):
        return ThicknessEval(t_g, math.nan, MAX_THICKNESS_ERROR, True)
    c_d = c1 if np.linalg.norm(d - c1) <= np.linalg.norm(d - c2) else c2
    if c_d is c_g:
        t_d = float(np.linalg.norm(p - d) / np.linalg.norm(p - c_g))
    else:
        t_d = float(np.linalg.norm(p - d) / np.linalg.norm(p - c_d)) + t_g
    return ThicknessEval(t_g, t_d, min(abs(t_g - t_d), MAX_THICKNESS_ERROR), False)


def thickness_eval_ski(gt, det, geometry, mask=None):
    g = np.asarray(gt, dtype=np.float64)
    d = np.asarray(det, dtype=np.float64)
    c1, c2 = geometry.c1, geometry.c2
    width = float(np.linalg.norm(c1 - c2))
    t_g = float(np.linalg.norm(c1 - g) / width)
    if _outside(mask, d) or not np.all(np.isfinite(d)):
        return ThicknessEval(t_g, math.nan, MAX_THICKNESS_ERROR, True)
    t_d = float(np.linalg.norm(c1 - d) / width)
    return ThicknessEval(t_g, t_d, min(abs(t_g - t_d), MAX_THICKNESS_ERROR), False)


@dataclass(frozen=True)
class PointResult:
    """One evaluated query: normalised distance and, for arbitrary points, thickness."""

    image_id: str
    part: str
    kind: str
    distance: float
    thickness: ThicknessEval | None = None
    masked_split: bool = True


@dataclass
class MetricsReport:
    std_pck: float
    full_pck: float
    mte: float
    pct: float
    per_part: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    COLUMNS = ("std_pck", "full_pck", "mte", "pct")

    def to_dict(self):
        return {
            "std_pck": self.std_pck,
            "full_pck": self.full_pck,
            "mte": self.mte,
            "pct": self.pct,
            "per_part": self.per_part,
            "counts": self.counts,
            "excluded": self.excluded,
        }

    def to_text(self):
        """Tab separated: a Table-1-like summary row, then one row per part."""
        fmt = lambda v: "nan" if v is None or v != v else f"{100 * v:.1f}"  # noqa: E731
        lines = ["# summary", "std_pck\tfull_pck\tmte\tpct"]
        lines.append("\t".join(fmt(getattr(self, c)) for c in self.COLUMNS))
        lines += ["# per part", "part\tn\tpck\tmte\tpct"]
        for part, row in sorted(self.per_part.items()):
            lines.append(
                f"{part}\t{row['n']}\t{fmt(row['pck'])}\t{fmt(row.get('mte'))}\t{fmt(row.get('pct'))}"
            )
        lines.append("# counts")
        for k, v in sorted({**self.counts, **{f"excluded_{k}": v for k, v in self.excluded.items()}}.items()):
            lines.append(f"{k}\t{v}")
        return "\n".join(lines) + "\n"


def _mean(values):
    return float(np.mean(values)) if len(values) else math.nan


def aggregate(results, pck_threshold=PCK_THRESHOLD, pct_threshold=PCT_THRESHOLD, excluded=None):
    """Combine per-point results into a report.

    Std PCK uses standard keypoints on every image; Full PCK uses standard and
    arbitrary points on images with masks, weighted per point. MTE/PCT use
    the arbitrary points.
    """
    results = list(results)
    if not results:
        raise EmptyReportError("nothing to aggregate")
    std = [r.distance <= pck_threshold for r in results if r.kind == "standard"]
    full = [r.distance <= pck_threshold for r in results if r.masked_split]
    errors = [r.thickness.e for r in results if r.thickness is not None]
    per_part = {}
    for r in results:
        row = per_part.setdefault(r.part, {"hits": [], "e": []})
        row["hits"].append(r.distance <= pck_threshold)
        if r.thickness is not None:
            row["e"].append(r.thickness.e)
    table = {}
    for part, row in per_part.items():
        e = row["e"]
        table[part] = {
            "n": len(row["hits"]),
            "pck": _mean(row["hits"]),
            "mte": _mean(e) if e else None,
            "pct": _mean([x <= pct_threshold for x in e]) if e else None,
        }
    return MetricsReport(
        std_pck=_mean(std),
        full_pck=_mean(full),
        mte=_mean(errors),
        pct=_mean([x <= pct_threshold for x in errors]),
        per_part=table,
        counts={
            "standard": len(std),
            "full": len(full),
            "arbitrary": len(errors),
            "out_of_mask": sum(1 for r in results if r.thickness is not None and r.thickness.out_of_mask),
        },
        excluded=dict(excluded or {}),
    )


def summarize_errors(errors, threshold=PCT_THRESHOLD):
    """MTE and PCT of a plain list of thickness errors."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise EmptyReportError("no thickness errors")
    return float(e.mean()), float(np.mean(e <= threshold))
