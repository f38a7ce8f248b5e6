"""On-disk datasets: ``annotations.jsonl``, ``images/<id>.png``, ``masks/<id>_<part>.png``."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    PAPER_INPUT_SIZE,
    crop_and_resize,
    crop_image,
    load_annotations,
    load_image,
    load_masks,
    save_image,
    save_mask,
    write_annotations,
    mask_path,
)
from .synthgen import FigureConfig, GenerationError, generate_figure

log = logging.getLogger(__name__)

ANNOTATIONS = "annotations.jsonl"
IMAGES = "images"
MASKS = "masks"


def write_synthetic_dataset(out_dir, count, seed=0, config=None, mask_fraction=1.0):
    """Generate ``count`` figures; returns the list of annotations.

    Figure seeds are drawn from ``seed``; seeds whose figure does not fit the
    image are skipped. Only a ``mask_fraction`` share of images gets masks.
    """
    config = config or FigureConfig()
    out = Path(out_dir)
    (out / IMAGES).mkdir(parents=True, exist_ok=True)
    (out / MASKS).mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    n_masked = int(round(mask_fraction * count))
    masked = set(np.random.default_rng([seed, 1]).permutation(count)[:n_masked].tolist())
    annotations = []
    attempt = 0
    while len(annotations) < count:
        fig_seed = int(rng.integers(2**31))
        attempt += 1
        if attempt > 100 * count + 100:
            raise GenerationError("figure config fails to fit too often")
        image_id = f"s{seed}_{len(annotations):05d}"
        try:
            image, ann, masks = generate_figure(config.with_seed(fig_seed, image_id))
        except GenerationError:
            continue
        save_image(out / IMAGES / f"{image_id}.png", image)
        if len(annotations) in masked:
            for m in masks:
                save_mask(mask_path(out / MASKS, image_id, m.part_id), m)
        annotations.append(ann)
    write_annotations(out / ANNOTATIONS, annotations)
    return annotations


class MaskAccessError(RuntimeError):
    pass


@dataclass(eq=False)
class Sample:
    """One annotated image with its crop; masks are loaded on first access."""

    annotation: object
    image: np.ndarray
    crop: object
    input_image: np.ndarray
    mask_dir: Path | None = None
    _masks: dict | None = None
    mask_reads: int = 0

    @property
    def image_id(self):
        return self.annotation.image_id

    @property
    def image_size(self):
        return self.image.shape[1], self.image.shape[0]

    @property
    def masks(self):
        if self._masks is None:
            self.mask_reads += 1
            if self.mask_dir is None:
                self._masks = {}
            else:
                self._masks = load_masks(self.mask_dir, self.image_id, self.image_size)
        return self._masks

    def has_masks(self):
        """Cheap existence check that does not read any mask file."""
        if self._masks is not None:
            return bool(self._masks)
        if self.mask_dir is None:
            return False
        return any(self.mask_dir.glob(f"{self.image_id}_*.png"))


def make_sample(annotation, image, masks=None, input_size=PAPER_INPUT_SIZE, mask_dir=None):
    crop = crop_and_resize(annotation, (image.shape[1], image.shape[0]), input_size)
    inp = np.clip(np.round(crop_image(image, crop)), 0, 255).astype(np.uint8)
    sample = Sample(annotation, image, crop, inp, Path(mask_dir) if mask_dir else None)
    if masks is not None:
        sample._masks = {m.part_id: m for m in masks} if isinstance(masks, list) else dict(masks)
    return sample


def load_dataset(data_dir, input_size=PAPER_INPUT_SIZE, limit=None):
    data_dir = Path(data_dir)
    annotations = load_annotations(data_dir / ANNOTATIONS)
    if limit is not None:
        annotations = annotations[:limit]
    mask_dir = data_dir / MASKS
    samples = []
    for ann in annotations:
        image = load_image(data_dir / IMAGES / f"{ann.image_id}.png")
        samples.append(
            make_sample(ann, image, None, input_size, mask_dir if mask_dir.exists() else None)
        )
    log.info("loaded %d samples from %s", len(samples), data_dir)
    return samples
