import math

import numpy as np
import pytest

from arbkp.datamodel import KEYPOINT_INDEX
from arbkp.synthgen import (
    PAINT_ORDER,
    FigureConfig,
    GenerationError,
    _pixel_centers,
    capsule,
    figure_shapes,
    generate_figure,
    ski_kink,
)
from oracles import march_runs


def test_deterministic():
    a = generate_figure(FigureConfig(seed=13))
    b = generate_figure(FigureConfig(seed=13))
    assert np.array_equal(a[0], b[0])
    assert a[1] == b[1]
    assert all(np.array_equal(m.raster, n.raster) for m, n in zip(a[2], b[2]))


def test_different_seeds_differ():
    a = generate_figure(FigureConfig(seed=20))[0]
    b = generate_figure(FigureConfig(seed=21))[0]
    assert not np.array_equal(a, b)


def test_output_shapes(figures):
    cfg = FigureConfig()
    for image, ann, masks in figures:
        assert image.shape == (cfg.height, cfg.width, 3) and image.dtype == np.uint8
        assert ann.visible().all()
        assert sorted(m.part_id for m in masks) == sorted(PAINT_ORDER)
        for m in masks:
            assert m.raster.shape == (cfg.height, cfg.width) and m.raster.any()


def test_keypoints_inside_image(figures):
    cfg = FigureConfig()
    for _, ann, _ in figures:
        xy = ann.xy()
        assert (xy >= 0).all() and (xy[:, 0] < cfg.width).all() and (xy[:, 1] < cfg.height).all()


def test_limb_interior_inside_mask(figures):
    for _, ann, masks in figures:
        by = {m.part_id: m for m in masks}
        for s in "lr":
            for part, (a, b) in (("upper_arm", ("shoulder", "elbow")), ("lower_leg", ("knee", "ankle"))):
                ka, kb = ann[f"{s}_{a}"], ann[f"{s}_{b}"]
                for t in np.linspace(0.05, 0.95, 19):
                    pt = (t * ka.x + (1 - t) * kb.x, t * ka.y + (1 - t) * kb.y)
                    assert by[f"{s}_{part}"].contains(pt)


def test_capsule_chord_width():
    # thickness 10 capsule along x; vertical chord through the middle measures 10 +- 0.5
    grid = _pixel_centers(80, 60)
    raster = capsule(grid, np.array([20.0, 30.2]), np.array([60.0, 30.2]), 5.0)
    runs = march_runs(raster, np.array([40.3, 30.2]), np.array([0.0, 1.0]))
    assert len(runs) == 1
    assert abs((runs[0][1] - runs[0][0]) - 10.0) <= 0.5


def test_measured_limb_thickness():
    for seed in (13, 20, 21, 25):
        cfg = FigureConfig(seed=seed)
        _, ann, masks = generate_figure(cfg)
        want = figure_shapes(cfg)["thickness"]["l_thigh"]
        hip, knee = ann.xy()[KEYPOINT_INDEX["l_hip"]], ann.xy()[KEYPOINT_INDEX["l_knee"]]
        d = knee - hip
        o = np.array([-d[1], d[0]]) / np.hypot(*d)
        raster = next(m.raster for m in masks if m.part_id == "l_thigh")
        runs = march_runs(raster, 0.5 * (hip + knee), o)
        hit = [r for r in runs if r[0] <= 0 <= r[1]][0]
        assert abs((hit[1] - hit[0]) - want) <= 1.5


def test_ski_chord_leaves_mask(figures):
    # the kink pushes the ski off its tip-tail chord near the middle
    for _, ann, masks in figures:
        for s in "lr":
            tip = np.array([ann[f"{s}_ski_tip"].x, ann[f"{s}_ski_tip"].y])
            tail = np.array([ann[f"{s}_ski_tail"].x, ann[f"{s}_ski_tail"].y])
            mask = next(m for m in masks if m.part_id == f"{s}_ski")
            assert not mask.contains(0.5 * (tip + tail))


def test_ski_kink_geometry():
    tip, tail = np.array([0.0, 0.0]), np.array([10.0, 0.0])
    k = ski_kink(tip, tail, 0.5)
    assert k[0] == pytest.approx(5.0)
    assert k[1] == pytest.approx(-5.0 * math.tan(0.25))
    a, b = tip - k, tail - k
    angle = math.acos(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert angle == pytest.approx(math.pi - 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        FigureConfig(limb_thickness=(1.0, 1.5))
    with pytest.raises(ValueError):
        FigureConfig(mask_dropout=2.0)


def test_too_small_image_raises():
    with pytest.raises(GenerationError):
        generate_figure(FigureConfig(width=40, height=40))


def test_mask_noise_keeps_annotation():
    exact = generate_figure(FigureConfig(seed=25))
    noisy = generate_figure(FigureConfig(seed=25, mask_morph_radius=2))
    assert exact[1] == noisy[1]
    for m, n in zip(exact[2], noisy[2]):
        assert n.raster.sum() >= m.raster.sum()
