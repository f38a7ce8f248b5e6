import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arbkp.datamodel import PartMask, PoseAnnotation
from arbkp.geometry import (
    DEFAULT_SEGMENTS,
    ArbitraryKeypointSpec,
    NoIntersectionError,
    PreconditionError,
    DegenerateSegmentError,
    compute_projection_geometry,
    line_runs,
    place_keypoint,
    point_to_spec,
    sample_gt_keypoints,
    segment_normal,
    spec_to_point,
)
from oracles import oracle_geometry

TOL = 1e-3


def ski_rect_case():
    """The rectangle case with the same raster used as a straight left ski."""
    raster = np.zeros((48, 64), dtype=bool)
    raster[14:34, 10:50] = True
    xy = np.zeros((17, 2))
    vis = np.zeros(17, dtype=bool)
    # l_ski_tip (13) -> l_ski_tail (15)
    xy[13], xy[15] = (10, 24), (50, 24)
    vis[[13, 15]] = True
    ann = PoseAnnotation.from_arrays("ski", xy, vis)
    return ann, {"l_ski": PartMask("l_ski", raster)}


def test_segment_table():
    assert len(DEFAULT_SEGMENTS) == 10
    seg = DEFAULT_SEGMENTS["l_upper_arm"]
    assert (seg.k_i, seg.k_j, seg.kind) == (1, 3, "limb")
    assert DEFAULT_SEGMENTS["r_ski"].kind == "ski"
    with pytest.raises(KeyError):
        DEFAULT_SEGMENTS["tail"]


def test_normal_orientation():
    assert np.allclose(segment_normal((10, 24), (50, 24)), (0, 1))
    with pytest.raises(DegenerateSegmentError):
        segment_normal((1, 1), (1, 1))


def test_rectangle_intersections(rect):
    ann, masks = rect
    g = compute_projection_geometry(ann, masks, "l_upper_arm", 0.5)
    assert np.allclose(g.p, (30, 24))
    assert np.allclose(g.c1, (30, 34), atol=TOL)
    assert np.allclose(g.c2, (30, 14), atol=TOL)


def test_rectangle_matches_oracle(rect):
    ann, masks = rect
    for alpha in (0.05, 0.3, 0.5, 0.77, 0.95):
        g = compute_projection_geometry(ann, masks, "l_upper_arm", alpha)
        p, c1, c2 = oracle_geometry(ann, masks["l_upper_arm"].raster, "l_upper_arm", alpha)
        assert np.allclose(g.p, p)
        assert np.allclose(g.c1, c1, atol=0.02) and np.allclose(g.c2, c2, atol=0.02)


def test_alpha_one_is_first_keypoint(rect):
    ann, masks = rect
    g = compute_projection_geometry(ann, masks, "l_upper_arm", 1.0)
    assert np.allclose(g.p, (10, 24))


def test_limb_spec_to_point(rect):
    ann, masks = rect
    spec = ArbitraryKeypointSpec.limb("l_upper_arm", 0.5, "c1", 0.5)
    assert np.allclose(spec_to_point(ann, masks, spec), (30, 29), atol=TOL)
    spec = ArbitraryKeypointSpec.limb("l_upper_arm", 0.5, "c2", 0.0)
    assert np.allclose(spec_to_point(ann, masks, spec), (30, 14), atol=TOL)
    spec = ArbitraryKeypointSpec.limb("l_upper_arm", 0.5, "c2", 1.0)
    assert np.allclose(spec_to_point(ann, masks, spec), (30, 24))


def test_ski_spec_to_point():
    ann, masks = ski_rect_case()
    spec = ArbitraryKeypointSpec.ski("l_ski", 0.5, 0.25)
    assert np.allclose(spec_to_point(ann, masks, spec), (30, 19), atol=TOL)


def test_standard_and_projection_specs(rect):
    ann, masks = rect
    assert np.allclose(spec_to_point(ann, masks, ArbitraryKeypointSpec.standard("l_elbow")), (50, 24))
    proj = ArbitraryKeypointSpec.projection("l_upper_arm", 0.25)
    assert np.allclose(spec_to_point(ann, {}, proj), (40, 24))
    with pytest.raises(PreconditionError):
        spec_to_point(ann, masks, ArbitraryKeypointSpec.standard("l_wrist"))


def test_missing_mask_and_visibility(rect):
    ann, _ = rect
    with pytest.raises(PreconditionError):
        compute_projection_geometry(ann, {}, "l_upper_arm", 0.5)
    with pytest.raises(PreconditionError):
        compute_projection_geometry(ann, rect[1], "l_forearm", 0.5)


def test_limb_without_hit_raises(rect):
    ann, masks = rect
    raster = masks["l_upper_arm"].raster.copy()
    raster[:, 25:35] = False
    cut = {"l_upper_arm": PartMask("l_upper_arm", raster)}
    with pytest.raises(NoIntersectionError):
        compute_projection_geometry(ann, cut, "l_upper_arm", 0.5)


def test_ski_picks_run_nearest_chord():
    ann, masks = ski_rect_case()
    raster = np.zeros((48, 64), dtype=bool)
    raster[4:8, 10:50] = True  # far run above the chord
    raster[26:30, 10:50] = True  # near run below
    g = compute_projection_geometry(ann, {"l_ski": PartMask("l_ski", raster)}, "l_ski", 0.5)
    assert np.allclose(g.c1, (30, 30), atol=TOL) and np.allclose(g.c2, (30, 26), atol=TOL)


def test_point_to_spec(rect):
    ann, masks = rect
    spec, out = point_to_spec(ann, masks, "l_upper_arm", (30, 29))
    assert not out
    assert spec.side == "c1" and spec.alpha == pytest.approx(0.5) and spec.beta == pytest.approx(0.5, abs=TOL)
    spec, out = point_to_spec(ann, masks, "l_upper_arm", (30, 40))
    assert out and spec.beta == 0.0


def test_point_to_spec_ski():
    ann, masks = ski_rect_case()
    spec, out = point_to_spec(ann, masks, "l_ski", (20, 19))
    assert not out and spec.alpha == pytest.approx(0.75) and spec.beta == pytest.approx(0.25, abs=TOL)
    _, out = point_to_spec(ann, masks, "l_ski", (20, 8))
    assert out


@pytest.mark.parametrize(
    "u, side, want",
    [(0.0, "c1", (30, 24)), (1.0, "c1", (30, 34)), (0.25, "c2", (30, 19)), (1.0, "c2", (30, 14))],
)
def test_limb_sampler_transform(rect, u, side, want):
    ann, masks = rect
    g = compute_projection_geometry(ann, masks, "l_upper_arm", 0.5)
    spec, pt = place_keypoint(g, "limb", u, side)
    assert np.allclose(pt, want, atol=TOL)
    assert spec.beta == pytest.approx(1 - math.sqrt(u))


@pytest.mark.parametrize("u, beta", [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0), (1 / 3, 0.25)])
def test_ski_sampler_transform(u, beta):
    ann, masks = ski_rect_case()
    g = compute_projection_geometry(ann, masks, "l_ski", 0.5)
    spec, pt = place_keypoint(g, "ski", u)
    assert spec.beta == pytest.approx(beta)
    assert np.allclose(pt, beta * g.c1 + (1 - beta) * g.c2)


def test_flipped_spec():
    s = ArbitraryKeypointSpec.limb("l_forearm", 0.3, "c1", 0.4).flipped()
    assert (s.segment_id, s.side, s.beta) == ("r_forearm", "c2", 0.4)
    s = ArbitraryKeypointSpec.ski("r_ski", 0.3, 0.2).flipped()
    assert (s.segment_id, s.beta) == ("l_ski", pytest.approx(0.8))
    assert ArbitraryKeypointSpec.standard("l_hip").flipped().keypoint == "r_hip"


def test_spec_validation():
    with pytest.raises(ValueError):
        ArbitraryKeypointSpec.limb("l_forearm", 0.3, "none", 0.4)
    with pytest.raises(ValueError):
        ArbitraryKeypointSpec.ski("l_ski", 1.3, 0.4)
    with pytest.raises(ValueError):
        ArbitraryKeypointSpec("standard", keypoint="tail")


def test_spec_record_round_trip():
    for s in (
        ArbitraryKeypointSpec.limb("l_forearm", 0.3, "c1", 0.4),
        ArbitraryKeypointSpec.ski("r_ski", 0.1, 0.9),
        ArbitraryKeypointSpec.standard("head"),
        ArbitraryKeypointSpec.projection("l_thigh", 0.6),
    ):
        assert ArbitraryKeypointSpec.from_record(s.to_record()) == s


def test_line_runs_axis_aligned():
    raster = np.zeros((10, 10), dtype=bool)
    raster[2:5, :] = True
    raster[7:9, :] = True
    runs = line_runs(raster, np.array([3.5, 0.0]), np.array([0.0, 1.0]))
    assert runs == [(2.0, 5.0), (7.0, 9.0)]


def test_samples_inside_masks(figures):
    rng = np.random.default_rng(0)
    for _, ann, masks in figures:
        by = {m.part_id: m for m in masks}
        for spec, pt in sample_gt_keypoints(ann, by, 50, rng):
            assert by[spec.segment_id].contains(pt)
            assert np.allclose(spec_to_point(ann, by, spec), pt)


@settings(max_examples=60, deadline=None)
@given(
    seg=st.sampled_from(["l_upper_arm", "r_forearm", "l_thigh", "r_lower_leg", "l_ski", "r_ski"]),
    alpha=st.floats(0.02, 0.98),
    beta=st.floats(0.02, 0.98),
    side=st.sampled_from(["c1", "c2"]),
)
def test_spec_point_round_trip(figures, seg, alpha, beta, side):
    _, ann, masks = figures[0]
    by = {m.part_id: m for m in masks}
    if seg.endswith("ski"):
        spec = ArbitraryKeypointSpec.ski(seg, alpha, beta)
    else:
        spec = ArbitraryKeypointSpec.limb(seg, alpha, side, beta)
    try:
        pt = spec_to_point(ann, by, spec)
    except NoIntersectionError:
        return
    back, out = point_to_spec(ann, by, seg, pt)
    assert not out
    assert np.allclose(spec_to_point(ann, by, back), pt, atol=1e-6)
    assert back.alpha == pytest.approx(alpha, abs=1e-9) and back.beta == pytest.approx(beta, abs=1e-6)
    if spec.kind == "limb":
        assert back.side == side
