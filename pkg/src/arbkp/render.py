"""Overlay figures: equally spaced keypoint lines per part, and report plots."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from matplotlib.figure import Figure

from .geometry import (
    DEFAULT_SEGMENTS,
    LIMB,
    ArbitraryKeypointSpec,
    GeometryError,
    spec_to_point,
)
from .synthgen import PART_COLORS

log = logging.getLogger(__name__)

PNG_METADATA = {"Software": None}
SKI_END_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class RenderSpec:
    lines: int = 4
    alpha_steps: int = 25
    linewidth: float = 1.0

    def __post_init__(self):
        if self.lines < 1:
            raise ValueError("lines must be at least 1")
        if self.alpha_steps < 2:
            raise ValueError("alpha_steps must be at least 2")


def line_betas(kind, n):
    """Betas of the drawn lines: limbs from the centre line out to the edge on
    each side, skis from one edge to the other."""
    if kind == LIMB:
        return [1.0] if n == 1 else [1.0 - k / (n - 1) for k in range(n)]
    return [0.5] if n == 1 else [k / (n - 1) for k in range(n)]


def line_specs(segment, spec=RenderSpec()):
    """``[(specs along alpha, rgb colour in [0, 1])]`` for one segment."""
    alphas = np.linspace(0.0, 1.0, spec.alpha_steps)
    base = np.array(PART_COLORS.get(segment.part_id, (255, 0, 0)), dtype=np.float64)
    out = []
    for beta in line_betas(segment.kind, spec.lines):
        if segment.kind == LIMB:
            sides = ("c1",) if beta == 1.0 else ("c1", "c2")
            # white on the centre line, the pure part colour at the edge
            colour = (beta * 255.0 + (1.0 - beta) * base) / 255.0
            for side in sides:
                specs = [ArbitraryKeypointSpec.limb(segment.segment_id, a, side, beta) for a in alphas]
                out.append((specs, tuple(colour)))
        else:
            colour = (beta * base + (1.0 - beta) * np.array(SKI_END_COLOR)) / 255.0
            specs = [ArbitraryKeypointSpec.ski(segment.segment_id, a, beta) for a in alphas]
            out.append((specs, tuple(colour)))
    return out


def gt_polylines(annotation, masks, spec=RenderSpec(), table=DEFAULT_SEGMENTS):
    """``[(part, (n, 2) points with NaN gaps, colour)]`` from ground-truth geometry."""
    lines = []
    for seg in table:
        if seg.part_id not in masks:
            log.warning("%s: no mask for %s, part skipped", annotation.image_id, seg.part_id)
            continue
        for specs, colour in line_specs(seg, spec):
            pts = []
            for s in specs:
                try:
                    pts.append(spec_to_point(annotation, masks, s, table))
                except GeometryError:
                    pts.append((np.nan, np.nan))
            pts = np.asarray(pts, dtype=np.float64)
            if np.isnan(pts).all():
                log.warning("%s: no geometry for %s, part skipped", annotation.image_id, seg.part_id)
                break
            lines.append((seg.part_id, pts, colour))
    return lines


def model_polylines(model, sample, spec=RenderSpec(), table=DEFAULT_SEGMENTS):
    """Polylines from model detections, one forward pass for all lines."""
    from .evaluate import predict_points

    vis = sample.annotation.visible()
    groups = []
    for seg in table:
        if not (vis[seg.k_i] and vis[seg.k_j]):
            log.warning("%s: %s keypoints not visible, part skipped", sample.image_id, seg.part_id)
            continue
        groups += [(seg.part_id, specs, colour) for specs, colour in line_specs(seg, spec)]
    if not groups:
        return []
    flat = [s for _, specs, _ in groups for s in specs]
    pts, _ = predict_points(model, sample, flat)
    lines, i = [], 0
    for part, specs, colour in groups:
        lines.append((part, pts[i : i + len(specs)], colour))
        i += len(specs)
    return lines


def draw_overlay(image, polylines, path, linewidth=1.0):
    """Draw polylines over ``image`` at native resolution and save a PNG."""
    h, w = image.shape[:2]
    dpi = 100
    fig = Figure(figsize=(w / dpi, h / dpi), dpi=dpi)
    ax = fig.add_axes((0, 0, 1, 1))
    ax.imshow(image, interpolation="nearest", extent=(0, w, h, 0))
    for _, pts, colour in polylines:
        ax.plot(pts[:, 0], pts[:, 1], color=colour, linewidth=linewidth, antialiased=True)
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.savefig(path, dpi=dpi, metadata=PNG_METADATA)
    return path


def render_overlay(image, path, annotation=None, masks=None, model=None, sample=None, spec=RenderSpec()):
    """GT mode with ``annotation`` and ``masks``; model mode with ``model`` and ``sample``."""
    if model is not None:
        lines = model_polylines(model, sample, spec)
    elif annotation is not None and masks is not None:
        lines = gt_polylines(annotation, masks, spec)
    else:
        raise ValueError("need a model and sample, or an annotation and masks")
    draw_overlay(np.asarray(image), lines, path, spec.linewidth)
    return lines


def render_report_figure(report, path):
    """Per-part PCK and PCT bars for an evaluation report."""
    parts = sorted(report.per_part)
    pck = [report.per_part[p]["pck"] for p in parts]
    pct = [report.per_part[p]["pct"] if report.per_part[p]["pct"] is not None else np.nan for p in parts]
    fig = Figure(figsize=(8, 4), dpi=100)
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(len(parts))
    ax.bar(x - 0.2, pck, width=0.4, label="PCK@0.1")
    ax.bar(x + 0.2, pct, width=0.4, label="PCT@0.2")
    ax.set_xticks(x)
    ax.set_xticklabels(parts, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_title(
        f"std PCK {report.std_pck:.3f}  full PCK {report.full_pck:.3f}  "
        f"MTE {report.mte:.3f}  PCT {report.pct:.3f}",
        fontsize=9,
    )
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    return path

