"""Model inference on samples and scoring against ground truth."""

from __future__ import annotations

import logging
import zlib

import numpy as np

from .geometry import (
    DEFAULT_SEGMENTS,
    LIMB,
    SKI,
    STANDARD,
    ArbitraryKeypointSpec,
    GeometryError,
    compute_projection_geometry,
    sample_gt_keypoints,
)
from .metrics import (
    PointResult,
    UndefinedTorsoError,
    aggregate,
    thickness_eval_limb,
    thickness_eval_ski,
    torso_size,
)
from .transformer import decode_batch, predict_heatmaps

log = logging.getLogger(__name__)

EVAL_KEYPOINTS = 200


def image_rng(seed, image_id):
    """Per-image generator that does not depend on dataset order."""
    return np.random.default_rng([seed, zlib.crc32(image_id.encode())])


def standard_queries(annotation):
    specs, points = [], []
    for slot, kp in enumerate(annotation.keypoints):
        if kp.visible:
            specs.append(ArbitraryKeypointSpec.standard(slot))
            points.append((kp.x, kp.y))
    return specs, np.array(points, dtype=np.float64).reshape(-1, 2)


def gt_queries(sample, n_arbitrary=EVAL_KEYPOINTS, seed=0):
    """Standard keypoints plus ``n_arbitrary`` fixed-seed arbitrary points when masks exist."""
    specs, points = standard_queries(sample.annotation)
    if n_arbitrary and sample.has_masks():
        pairs = sample_gt_keypoints(
            sample.annotation, sample.masks, n_arbitrary, image_rng(seed, sample.image_id)
        )
        specs += [s for s, _ in pairs]
        if pairs:
            points = np.concatenate([points, np.array([p for _, p in pairs])])
    return specs, points


def predict_points(model, sample, specs, chunk=None):
    """Detections in original image coordinates and their scores."""
    hms = predict_heatmaps(model, sample.input_image, specs, chunk)
    pts, scores = decode_batch(hms, model.config)
    return sample.crop.inverse(pts), scores


def score_points(
    annotation, masks, specs, gt_points, det_points, masked_split, table=DEFAULT_SEGMENTS, excluded=None
):
    """Per-query :class:`PointResult` list; raises if the torso is undefined.

    Points whose ground-truth geometry fails are skipped and counted in
    ``excluded["failed_geometry"]``.
    """
    torso = torso_size(annotation)
    results = []
    skipped = 0
    for spec, g, d in zip(specs, gt_points, det_points):
        dist = float(np.linalg.norm(np.asarray(g) - np.asarray(d))) / torso
        thick = None
        if spec.kind in (LIMB, SKI):
            try:
                geom = compute_projection_geometry(annotation, masks, spec.segment_id, spec.alpha, table)
            except GeometryError:
                skipped += 1
                continue
            mask = masks.get(table[spec.segment_id].part_id)
            fn = thickness_eval_limb if spec.kind == LIMB else thickness_eval_ski
            thick = fn(g, d, geom, mask)
        results.append(
            PointResult(annotation.image_id, spec.part_id, spec.kind, dist, thick, masked_split)
        )
    if excluded is not None:
        excluded["failed_geometry"] = excluded.get("failed_geometry", 0) + skipped
    if skipped:
        log.warning("%s: %d points without ground-truth geometry skipped", annotation.image_id, skipped)
    return results


def evaluate_samples(model, samples, n_arbitrary=EVAL_KEYPOINTS, seed=0):
    """Evaluate a model; returns the :class:`MetricsReport`."""
    results = []
    excluded = {"degenerate_torso": 0, "failed_geometry": 0}
    for sample in samples:
        specs, gts = gt_queries(sample, n_arbitrary, seed)
        if not specs:
            continue
        dets, _ = predict_points(model, sample, specs)
        try:
            results += score_points(
                sample.annotation, sample.masks if sample.has_masks() else {}, specs, gts, dets,
                sample.has_masks(), excluded=excluded,
            )
        except UndefinedTorsoError:
            excluded["degenerate_torso"] += 1
    return aggregate(results, excluded=excluded)
