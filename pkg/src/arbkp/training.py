"""Heatmap-MSE training with alternating objectives.

Objectives:

``standard_kp``
    the 17 standard keypoints, usable on every image.
``projection_kp``
    points on the straight line between two keypoints (``beta = 1``); no masks.
``segmentation_arbitrary``
    arbitrary limb/ski points generated from the part masks; only images with
    masks take part.
``pseudo_labels``
    random draws from a precomputed pseudo-label pool.

Each step trains one objective; enabled objectives are visited round-robin
(weighted by ``ratios``).
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datamodel import crop_image
from .dataset import load_dataset
from .evaluate import evaluate_samples, standard_queries
from .geometry import (
    DEFAULT_SEGMENTS,
    ArbitraryKeypointSpec,
    available_segments,
    projection_point,
    sample_gt_keypoints,
)
from .token_codec import encode_batch
from .transformer import (
    TOY_CONFIG,
    KeypointTransformer,
    ModelConfig,
    ema_update,
    image_tensor,
    make_targets,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("standard_kp", "segmentation_arbitrary", "projection_kp", "pseudo_labels")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    objectives: tuple = ("segmentation_arbitrary", "projection_kp")
    ratios: tuple | None = None
    pseudo_label_pool: str | None = None
    keypoint_range: tuple = (5, 50)
    pseudo_labels_per_step: int = 25
    optimizer: str = "adamw"
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup: int = 100
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    ema_rate: float = 0.99
    val_every: int = 0
    val_images: int | None = None
    init_checkpoint: str | None = None
    crop_jitter: float = 0.1
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        objs = tuple(self.objectives)
        object.__setattr__(self, "objectives", objs)
        if not objs:
            raise StrategyError("enable at least one objective")
        unknown = set(objs) - set(OBJECTIVES)
        if unknown:
            raise StrategyError(f"unknown objectives {sorted(unknown)}")
        lo, hi = self.keypoint_range
        if not 1 <= lo <= hi <= 200:
            raise StrategyError("keypoint_range must lie within [1, 200]")
        if "pseudo_labels" in objs and not self.pseudo_label_pool:
            raise StrategyError("pseudo_labels objective needs a pseudo_label_pool")
        if self.ratios is not None and len(self.ratios) != len(objs):
            raise StrategyError("ratios must match objectives")
        if self.optimizer not in ("sgd", "adamw"):
            raise StrategyError("optimizer must be 'sgd' or 'adamw'")

    @classmethod
    def from_file(cls, path=None, **overrides):
        data = {}
        if path:
            with open(path) as f:
                data = json.load(f)
        data.update(overrides)
        for key in ("objectives", "ratios", "keypoint_range"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def model_config(self):
        return replace(TOY_CONFIG, **self.model)

    def schedule(self):
        """Objective order for one round-robin cycle."""
        ratios = self.ratios or (1,) * len(self.objectives)
        cycle = []
        for k in range(max(ratios)):
            cycle += [o for o, r in zip(self.objectives, ratios) if k < r]
        return cycle


def loss(heatmaps, targets, weights=None):
    """Mean squared error over pixels and (weighted) queries."""
    if heatmaps.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(heatmaps.shape)} vs {tuple(targets.shape)}")
    sq = (heatmaps - targets) ** 2
    if weights is None:
        return sq.mean()
    per_query = sq.flatten(-2).mean(-1)
    w = weights.to(per_query.dtype)
    return (per_query * w).sum() / w.sum().clamp_min(1.0)


@dataclass
class Batch:
    images: torch.Tensor
    tokens: torch.Tensor
    targets: torch.Tensor
    weights: torch.Tensor


def _projection_queries(sample, count, rng, table=DEFAULT_SEGMENTS):
    vis = sample.annotation.visible()
    segs = [s.segment_id for s in table if vis[s.k_i] and vis[s.k_j]]
    specs, points = [], []
    for _ in range(count if segs else 0):
        seg = segs[rng.integers(len(segs))]
        alpha = rng.random()
        if table[seg].kind == "ski":
            specs.append(ArbitraryKeypointSpec.projection(seg, alpha))
        else:
            specs.append(ArbitraryKeypointSpec.limb(seg, alpha, "c1", 1.0))
        points.append(projection_point(sample.annotation, seg, alpha, table))
    return specs, points


def _pseudo_label_queries(labels, count, rng):
    if not labels:
        return [], []
    idx = rng.choice(len(labels), size=min(count, len(labels)), replace=False)
    return [labels[i][0] for i in idx], [labels[i][1] for i in idx]


def build_queries(sample, objective, rng, count, pseudo_labels=None):
    """Specs and image-space points for one sample under ``objective``."""
    if objective == "standard_kp":
        specs, pts = standard_queries(sample.annotation)
        return specs, list(pts)
    if objective == "projection_kp":
        return _projection_queries(sample, count, rng)
    if objective == "segmentation_arbitrary":
        pairs = sample_gt_keypoints(sample.annotation, sample.masks, count, rng)
        return [s for s, _ in pairs], [p for _, p in pairs]
    if objective == "pseudo_labels":
        return _pseudo_label_queries((pseudo_labels or {}).get(sample.image_id, []), count, rng)
    raise StrategyError(f"unknown objective {objective!r}")


def jitter_crop(crop, rng, amount):
    """Random rescale (1 +- amount) and shift (+- amount of the box size) of a crop."""
    x0, y0, x1, y1 = crop.padded_box
    w, h = x1 - x0, y1 - y0
    s = 1.0 + rng.uniform(-amount, amount)
    cx = (x0 + x1) / 2 + rng.uniform(-amount, amount) * w
    cy = (y0 + y1) / 2 + rng.uniform(-amount, amount) * h
    box = (cx - s * w / 2, cy - s * h / 2, cx + s * w / 2, cy + s * h / 2)
    return replace(crop, padded_box=box)


def make_batch(samples, objective, rng, config, count, pseudo_labels=None, crop_jitter=0.0):
    per = [build_queries(s, objective, rng, count, pseudo_labels) for s in samples]
    crops = [s.crop for s in samples]
    images = [s.input_image for s in samples]
    if crop_jitter > 0:
        crops = [jitter_crop(c, rng, crop_jitter) for c in crops]
        images = [
            np.clip(np.round(crop_image(s.image, c)), 0, 255).astype(np.uint8)
            for s, c in zip(samples, crops)
        ]
    k = max(1, max(len(sp) for sp, _ in per))
    n = len(samples)
    tokens = np.zeros((n, k, 20), dtype=np.float32)
    targets = np.zeros((n, k, config.heatmap_height, config.heatmap_width), dtype=np.float32)
    weights = np.zeros((n, k), dtype=np.float32)
    for b, (crop, (specs, pts)) in enumerate(zip(crops, per)):
        if not specs:
            continue
        m = len(specs)
        tokens[b, :m] = encode_batch(specs)
        inp = crop.forward(np.asarray(pts))
        targets[b, :m] = make_targets(inp, config)
        inside = (
            (inp[:, 0] >= 0) & (inp[:, 0] < config.input_width)
            & (inp[:, 1] >= 0) & (inp[:, 1] < config.input_height)
        )
        weights[b, :m] = inside
    return Batch(image_tensor(np.stack(images)), torch.from_numpy(tokens), torch.from_numpy(targets), torch.from_numpy(weights))


class TrainState:
    """Model, EMA copy, optimizer and step counter."""

    def __init__(self, model, strategy):
        self.model = model
        self.ema = copy.deepcopy(model)
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.strategy = strategy
        if strategy.optimizer == "sgd":
            self.optimizer = torch.optim.SGD(
                model.parameters(), lr=strategy.lr, momentum=strategy.momentum,
                weight_decay=strategy.weight_decay,
            )
        else:
            self.optimizer = torch.optim.AdamW(
                model.parameters(), lr=strategy.lr, weight_decay=strategy.weight_decay
            )
        self.step = 0

    def learning_rate(self, step):
        s = self.strategy
        if step < s.warmup:
            return s.lr * (step + 1) / s.warmup
        progress = (step - s.warmup) / max(1, s.steps - s.warmup)
        return s.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def train_step(batch, objective, state):
    """One optimizer step on ``batch``; updates the EMA model and returns the loss."""
    model = state.model
    model.train()
    for group in state.optimizer.param_groups:
        group["lr"] = state.learning_rate(state.step)
    state.optimizer.zero_grad(set_to_none=True)
    query_mask = batch.weights > 0
    pred = model(batch.images, batch.tokens, query_mask=query_mask)
    value = loss(pred, batch.targets, batch.weights)
    value.backward()
    state.optimizer.step()
    ema_update(state.ema, model, state.strategy.ema_rate)
    state.step += 1
    return value.item()


def load_pseudo_label_pool(path):
    """``{image_id: [(spec, point), ...]}`` from a pseudo-label file."""
    pool = defaultdict(list)
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            spec = ArbitraryKeypointSpec.from_record(rec)
            pool[rec["image_id"]].append((spec, np.array([rec["x"], rec["y"]])))
    return dict(pool)


def _eligible(samples, objective, pseudo_labels):
    if objective == "segmentation_arbitrary":
        out = [s for s in samples if s.has_masks() and available_segments(s.annotation, s.masks)]
        if not out:
            warnings.warn("no images with masks; segmentation_arbitrary steps are skipped")
        return out
    if objective == "pseudo_labels":
        return [s for s in samples if pseudo_labels.get(s.image_id)]
    return list(samples)


def _format(value):
    return float(f"{value:.9g}")


def run_strategy(strategy, train_samples, val_samples=None, out_dir=None, log_every=1):
    """Train with ``strategy``; returns ``(TrainState, log_records)``.

    With ``out_dir``, writes ``log.jsonl``, ``model.ckpt`` (EMA weights) and
    ``raw.ckpt``.
    """
    torch.manual_seed(strategy.seed)
    config = strategy.model_config()
    model = KeypointTransformer(config)
    if strategy.init_checkpoint:
        _, state_dict, _ = read_checkpoint(strategy.init_checkpoint)
        model.load_state_dict(state_dict)
    state = TrainState(model, strategy)
    if state.strategy.init_checkpoint:
        state.ema.load_state_dict(model.state_dict())
    pseudo_labels = (
        load_pseudo_label_pool(strategy.pseudo_label_pool) if strategy.pseudo_label_pool else {}
    )
    pools = {o: _eligible(train_samples, o, pseudo_labels) for o in strategy.objectives}
    cycle = strategy.schedule()
    records = []
    out = Path(out_dir) if out_dir else None
    logf = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "log.jsonl", "w")
    lo, hi = strategy.keypoint_range
    try:
        for step in range(strategy.steps):
            objective = cycle[step % len(cycle)]
            pool = pools[objective]
            if not pool:
                continue
            rng = np.random.default_rng([strategy.seed, step])
            idx = rng.choice(len(pool), size=min(strategy.batch_size, len(pool)), replace=False)
            count = (
                strategy.pseudo_labels_per_step if objective == "pseudo_labels"
                else int(rng.integers(lo, hi + 1))
            )
            batch = make_batch(
                [pool[i] for i in idx], objective, rng, config, count, pseudo_labels,
                strategy.crop_jitter,
            )
            value = train_step(batch, objective, state)
            rec = {"step": step + 1, "objective": objective, "loss": _format(value)}
            if (
                val_samples
                and strategy.val_every
                and ((step + 1) % strategy.val_every == 0 or step + 1 == strategy.steps)
            ):
                rep = evaluate_samples(state.ema, val_samples[: strategy.val_images], seed=strategy.seed)
                rec["val"] = {k: _format(getattr(rep, k)) for k in rep.COLUMNS}
                log.info("step %d val %s", step + 1, rec["val"])
            records.append(rec)
            if logf and ((step + 1) % log_every == 0 or "val" in rec):
                logf.write(json.dumps(rec) + "\n")
    finally:
        if logf:
            logf.close()
    if out:
        meta = {"strategy": _strategy_meta(strategy), "steps": state.step}
        save_checkpoint(out / "model.ckpt", state.ema, meta)
        save_checkpoint(out / "raw.ckpt", state.model, meta)
    return state, records


def _strategy_meta(strategy):
    d = asdict(strategy)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def smoothed(losses, window=50):
    """Trailing moving average."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], x]))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def run_strategy_from_dirs(strategy, train_dir, val_dir=None, out_dir=None):
    config = strategy.model_config()
    train = load_dataset(train_dir, config.input_size)
    val = load_dataset(val_dir, config.input_size) if val_dir else None
    return run_strategy(strategy, train, val, out_dir)
