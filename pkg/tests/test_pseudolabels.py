import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arbkp.dataset import load_dataset
from arbkp.geometry import ArbitraryKeypointSpec
from arbkp.pseudolabels import (
    VIEW_NAMES,
    PseudoLabel,
    Rejection,
    augmented_views,
    build_pool,
    consensus,
    make_view,
    read_pseudo_labels,
    select_balanced,
    write_pseudo_labels,
)
from arbkp.transformer import KeypointTransformer

W, H = 48, 64


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(VIEW_NAMES), st.floats(-100, 100), st.floats(-100, 100))
def test_view_round_trip(name, x, y):
    v = make_view(name, W, H)
    assert np.allclose(v.inverse(v.forward([x, y])), [x, y], atol=1e-6)


def test_views_fix_the_centre():
    for v in augmented_views(W, H):
        assert np.allclose(v.forward([W / 2, H / 2]), [W / 2, H / 2])


def test_rotations_cancel():
    a, b = make_view("rot+45", W, H), make_view("rot-45", W, H)
    pt = np.array([3.0, 50.0])
    assert np.allclose(b.forward(a.forward(pt)), pt)


def test_flip_view():
    v = make_view("hflip", W, H)
    assert np.allclose(v.forward([10.0, 7.0]), [38.0, 7.0])
    spec = ArbitraryKeypointSpec.limb("l_forearm", 0.2, "c1", 0.3)
    assert v.query(spec) == ArbitraryKeypointSpec.limb("r_forearm", 0.2, "c2", 0.3)
    assert make_view("identity", W, H).query(spec) == spec


def test_warp_matches_forward():
    img = np.zeros((H, W), dtype=np.uint8)
    img[20, 10] = 255
    for v in augmented_views(W, H):
        if v.view_id.startswith("scale0"):
            continue
        out = v.warp(img)
        peak = np.unravel_index(np.argmax(out), out.shape)
        want = v.forward([10.5, 20.5])
        assert abs(peak[1] + 0.5 - want[0]) <= 1.0 and abs(peak[0] + 0.5 - want[1]) <= 1.0


def test_unknown_view():
    with pytest.raises(ValueError):
        make_view("shear", W, H)


def test_consensus_spread():
    views = augmented_views(W, H)
    base = np.array([20.0, 30.0])
    offsets = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [0, 0]], dtype=float)
    truth = base + offsets
    points = [v.forward(p) for v, p in zip(views, truth)]
    point, std, support = consensus(points, [0.9] * 6, views, torso=100.0)
    want = np.sqrt(truth[:, 0].var() + truth[:, 1].var()) / 100.0
    assert std == pytest.approx(want)
    assert np.allclose(point, base) and support == 6


def test_consensus_std_example():
    views = augmented_views(W, H)[:4]
    truth = np.array([[10.0, 10.0], [10.0, 10.0], [12.0, 10.0], [8.0, 10.0]])
    points = [v.forward(p) for v, p in zip(views, truth)]
    _, std, _ = consensus(points, [1.0] * 4, views, torso=np.sqrt(2) * 100.0)
    assert std == pytest.approx(0.01)


def test_consensus_rejections():
    views = augmented_views(W, H)
    pts = [v.forward([20.0, 30.0]) for v in views]
    out = consensus(pts, [0.9, 0.9, 0.9, 0.1, 0.1, 0.1], views, 100.0)
    assert out == Rejection("too few views")
    out = consensus(pts, [0.1, 0.9, 0.9, 0.9, 0.9, 0.1], views, 100.0)
    assert out == Rejection("identity view below score")
    assert consensus(pts, [1.0] * 6, views, 0.0) == Rejection("degenerate torso")
    assert not isinstance(consensus(pts, [0.9] * 4 + [0.1] * 2, views, 100.0), Rejection)


def label(part, std, image_id="a", label_id=0):
    spec = ArbitraryKeypointSpec.ski(part, 0.5, 0.5) if part.endswith("ski") else ArbitraryKeypointSpec.limb(part, 0.5, "c1", 0.5)
    return PseudoLabel(image_id, label_id, spec, np.array([1.0, 2.0]), std, 6)


def test_select_balanced_quota():
    pool = [label("l_thigh", s, label_id=i) for i, s in enumerate([0.3, 0.1, 0.2, 0.4])]
    pool += [label("l_ski", s, label_id=10 + i) for i, s in enumerate([0.5, 0.05, 0.6, 0.7])]
    sel = select_balanced(pool, 0.5)
    assert sel.per_part == {"l_thigh": 2, "l_ski": 2}
    assert sorted(lab.std_conf for lab in sel.selected) == [0.05, 0.1, 0.2, 0.5]
    assert len(sel.rejected) == 4 and not sel.imbalance


def test_select_balanced_short_part():
    pool = [label("l_thigh", 0.1 * i, label_id=i) for i in range(5)] + [label("l_ski", 0.3, label_id=9)]
    sel = select_balanced(pool, 1.0)
    assert sel.per_part == {"l_thigh": 3, "l_ski": 1}
    assert sel.imbalance == {"l_ski": {"wanted": 3, "available": 1}}


def test_select_balanced_ties_are_stable():
    pool = [label("l_thigh", 0.2, image_id=i, label_id=k) for k, i in enumerate("cab")]
    sel = select_balanced(pool, 2 / 3)
    assert [lab.image_id for lab in sel.selected] == ["a", "b"]


def test_select_balanced_errors():
    with pytest.raises(ValueError):
        select_balanced([], 0.5)
    with pytest.raises(ValueError):
        select_balanced([label("l_thigh", 0.1)], 1.5)


def test_label_file_round_trip(tmp_path):
    labels = [label("l_thigh", 0.123, label_id=3), label("r_ski", 0.5, image_id="b")]
    path = tmp_path / "pl.jsonl"
    write_pseudo_labels(path, labels)
    back = read_pseudo_labels(path)
    assert [b.to_record() for b in back] == [a.to_record() for a in labels]


def test_build_pool_runs(synth_dir):
    samples = load_dataset(synth_dir, (48, 64), limit=2)
    model = KeypointTransformer()
    pool, rejected = build_pool(model, samples, per_image=10, min_score=0.0)
    assert len(pool) + sum(rejected.values()) == 20
    ids = [lab.label_id for lab in pool]
    assert len(set(ids)) == len(ids)
