import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from arbkp.transformer import (
    ConfigError,
    KeypointTransformer,
    ModelConfig,
    TOY_CONFIG,
    attention_adapted,
    attention_standard,
    decode_batch,
    decode_heatmap,
    ema_update,
    image_tensor,
    load_model,
    make_target,
    make_targets,
    read_checkpoint,
    save_checkpoint,
)

TINY = ModelConfig(
    input_height=16, input_width=16, patch_height=8, patch_width=8, dim=8, depth=2, heads=2,
    head_hidden=8, heatmap_height=4, heatmap_width=4,
)


def tokens(n, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, n, 20, generator=g)


def images(batch=1, config=TOY_CONFIG, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, config.input_height, config.input_width, generator=g) - 0.5


def test_output_shape():
    model = KeypointTransformer()
    out = model(images(2), tokens(7, 2))
    assert out.shape == (2, 7, 32, 24)


def test_wrong_image_size():
    model = KeypointTransformer()
    with pytest.raises(ConfigError):
        model(torch.zeros(1, 3, 32, 32), tokens(1))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_height=60)
    with pytest.raises(ConfigError):
        ModelConfig(dim=66, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(attention="sparse")


def test_zero_weights_give_zero_heatmaps():
    model = KeypointTransformer(TINY)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    out = model(images(1, TINY), tokens(3))
    assert torch.count_nonzero(out) == 0


def test_adapted_query_independence():
    model = KeypointTransformer().double().eval()
    img = images().double()
    q = tokens(1, seed=5).double()
    alone = model(img, q)
    with_others = model(img, torch.cat([tokens(30, seed=6).double(), q], dim=1))
    assert torch.allclose(alone[0, 0], with_others[0, -1], rtol=0, atol=1e-12)


def test_standard_mode_couples_queries():
    model = KeypointTransformer(TINY).double().eval()
    img = images(1, TINY).double()
    q = tokens(1, seed=5).double()
    alone = model(img, q, attention="standard")
    with_others = model(img, torch.cat([tokens(30, seed=6).double(), q], dim=1), attention="standard")
    assert not torch.allclose(alone[0, 0], with_others[0, -1], atol=1e-6)


def test_query_permutation_equivariance():
    model = KeypointTransformer().double().eval()
    img, q = images().double(), tokens(9).double()
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(1))
    for mode in ("adapted", "standard"):
        out = model(img, q, attention=mode)
        out_p = model(img, q[:, perm], attention=mode)
        assert torch.allclose(out[:, perm], out_p, atol=1e-10)


def test_visual_tokens_ignore_queries():
    model = KeypointTransformer(TINY).double().eval()
    n_vis = TINY.num_visual
    vis = model.visual_tokens(images(1, TINY).double())
    few = torch.cat([vis, model.embed_queries(tokens(1).double())], dim=1)
    many = torch.cat([vis, model.embed_queries(tokens(50).double())], dim=1)
    a = attention_adapted(model, few, 0)[:, :n_vis]
    b = attention_adapted(model, many, 0)[:, :n_vis]
    assert torch.allclose(a, b, atol=1e-12)
    a = attention_standard(model, few, 0)[:, :n_vis]
    b = attention_standard(model, many, 0)[:, :n_vis]
    assert not torch.allclose(a, b, atol=1e-6)


def test_attention_rows_sum_to_one():
    model = KeypointTransformer(TINY).double().eval()
    x = torch.cat([model.visual_tokens(images(1, TINY).double()), model.embed_queries(tokens(5).double())], dim=1)
    for fn, keys in ((attention_adapted, TINY.num_visual), (attention_standard, TINY.num_visual + 5)):
        _, w = fn(model, x, 0, return_weights=True)
        assert w.shape[-1] == keys
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))


def test_standard_padding_mask():
    model = KeypointTransformer(TINY).double().eval()
    img, q = images(1, TINY).double(), tokens(3).double()
    padded = torch.cat([q, torch.zeros(1, 2, 20, dtype=torch.float64)], dim=1)
    mask = torch.tensor([[True, True, True, False, False]])
    a = model(img, q, attention="standard")
    b = model(img, padded, query_mask=mask, attention="standard")
    assert torch.allclose(a, b[:, :3], atol=1e-12)


@pytest.mark.parametrize("mode", ["adapted", "standard"])
def test_gradients_match_finite_differences(mode):
    torch.manual_seed(0)
    model = KeypointTransformer(TINY).double()
    img = images(1, TINY).double().requires_grad_(True)
    q = tokens(3).double().requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda i, t: model(i, t, attention=mode), (img, q), eps=1e-6, atol=1e-4, rtol=1e-4
    )


def test_image_tensor():
    img = np.full((64, 48, 3), 255, dtype=np.uint8)
    img[0, 0] = (0, 51, 255)
    t = image_tensor(img)
    assert t.shape == (1, 3, 64, 48)
    assert t[0, :, 0, 0].tolist() == pytest.approx([-0.5, -0.3, 0.5])


def test_decode_exact_cell():
    hm = np.zeros((32, 24))
    hm[10, 20] = 1.0
    hm[10, 19] = hm[10, 21] = hm[9, 20] = hm[11, 20] = math.exp(-1 / 8)
    u, v, s = decode_heatmap(hm)
    assert (u, v) == pytest.approx((20, 10)) and s == 1.0


def test_decode_sub_cell_gaussian():
    xs = np.arange(24)
    ys = np.arange(32)
    hm = np.exp(-((xs[None, :] - 20.3) ** 2 + (ys[:, None] - 10) ** 2) / 8)
    u, v, _ = decode_heatmap(hm)
    assert u == pytest.approx(20.3, abs=1e-9) and v == pytest.approx(10, abs=1e-9)


def test_decode_spike_has_no_offset():
    hm = np.zeros((32, 24))
    hm[5, 7] = 0.4
    assert decode_heatmap(hm) == (7, 5, pytest.approx(0.4))


def test_decode_flat_and_negative():
    assert decode_heatmap(np.zeros((4, 6))) == (2.5, 1.5, 0.0)
    hm = -np.ones((4, 4))
    hm[1, 1] = -0.5
    u, v, s = decode_heatmap(hm)
    assert (u, v, s) == (1, 1, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(2, 21), st.floats(2, 29))
def test_decode_inverts_target(u, v):
    sx, sy = TOY_CONFIG.stride
    pt = ((u + 0.5) * sx, (v + 0.5) * sy)
    got, _ = decode_batch(make_target(pt, TOY_CONFIG)[None], TOY_CONFIG)
    assert np.allclose(got[0], pt, atol=1e-6)


def test_make_target_peak():
    hm = make_target((41.0, 21.0), TOY_CONFIG)  # cell (20, 10) centre
    assert hm.shape == (32, 24)
    assert hm[10, 20] == pytest.approx(1.0)
    assert hm[10, 22] == pytest.approx(math.exp(-4 / 8), rel=1e-6)
    assert np.allclose(make_targets([(41.0, 21.0), (3.0, 5.0)], TOY_CONFIG)[0], hm)


def test_ema_examples():
    out = ema_update({"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, 2.0])}, rate=0.99)
    assert np.allclose(out["w"], [1.02, 2.0])
    out = ema_update({"w": 0.0}, {"w": 1.0}, rate=0.5)
    assert out["w"] == 0.5
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_ema_modules():
    a, b = KeypointTransformer(TINY), KeypointTransformer(TINY)
    with torch.no_grad():
        for p in a.parameters():
            p.fill_(1.0)
        for p in b.parameters():
            p.fill_(3.0)
    ema_update(a, b, rate=0.75)
    assert all(torch.allclose(p, torch.full_like(p, 1.5)) for p in a.parameters())


def test_checkpoint_bit_exact(tmp_path):
    model = KeypointTransformer(TINY)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"step": 3})
    config, state, meta = read_checkpoint(path)
    assert config == TINY and meta == {"step": 3}
    for name, t in model.state_dict().items():
        assert torch.equal(state[name], t)
    loaded, _ = load_model(path)
    img, q = images(1, TINY), tokens(4)
    assert torch.equal(loaded(img, q), model.eval()(img, q))
    save_checkpoint(tmp_path / "n.ckpt", loaded, {"step": 3})
    assert (tmp_path / "n.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        read_checkpoint(path)
