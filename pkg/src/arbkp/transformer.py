"""Token-based keypoint transformer with query tokens built from (v_p, v_t).

Image patches are linearly embedded into visual tokens; a fixed 2D sine
positional encoding is added to the visual tokens in front of every layer.
Keypoint query tokens are appended after the visual tokens. Two attention rules
are available:

``standard``
    every token attends to every token.
``adapted``
    keys and values come from the visual tokens only. Visual tokens therefore
    never see the queries, and a query's output depends on the image and on
    itself alone.

A small MLP shared by all queries turns each final query token into a heatmap.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn

from .datamodel import Keypoint, NUM_KEYPOINTS
from .token_codec import THICKNESS_DIM, encode_batch

TOKEN_DIM = NUM_KEYPOINTS + THICKNESS_DIM
ATTENTION_MODES = ("standard", "adapted")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 64
    input_width: int = 48
    patch_height: int = 8
    patch_width: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    head_hidden: int = 128
    heatmap_height: int = 32
    heatmap_width: int = 24
    attention: str = "adapted"
    sigma: float = 2.0

    def __post_init__(self):
        if self.input_height % self.patch_height or self.input_width % self.patch_width:
            raise ConfigError("input dims must be divisible by patch dims")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.dim % 4:
            raise ConfigError("dim must be divisible by 4 for the 2D sine encoding")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")

    @property
    def grid(self):
        return self.input_height // self.patch_height, self.input_width // self.patch_width

    @property
    def num_visual(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def stride(self):
        """Input pixels per heatmap cell, (x, y)."""
        return self.input_width / self.heatmap_width, self.input_height / self.heatmap_height

    @property
    def input_size(self):
        return self.input_width, self.input_height

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# TokenPose-Base-like dims; depth/heads/head width are assumed values
PAPER_CONFIG = ModelConfig(
    input_height=256, input_width=192, patch_height=16, patch_width=12, dim=192, depth=12,
    heads=8, mlp_ratio=2, head_hidden=384, heatmap_height=64, heatmap_width=48,
)
TOY_CONFIG = ModelConfig()
PRESETS = {"paper": PAPER_CONFIG, "toy": TOY_CONFIG}


def sine_position_encoding(grid_h, grid_w, dim, temperature=10000.0):
    """Fixed 2D sine encoding, ``(grid_h * grid_w, dim)``; first half y, second half x."""
    half = dim // 2
    ys = (torch.arange(grid_h, dtype=torch.float64) + 0.5) / grid_h * 2 * math.pi
    xs = (torch.arange(grid_w, dtype=torch.float64) + 0.5) / grid_w * 2 * math.pi
    i = torch.arange(half, dtype=torch.float64)
    freq = temperature ** (2 * torch.div(i, 2, rounding_mode="floor") / half)

    def enc(pos):
        a = pos[:, None] / freq
        return torch.where(i % 2 == 0, torch.sin(a), torch.cos(a))

    ey, ex = enc(ys), enc(xs)
    pe = torch.cat(
        [ey[:, None, :].expand(grid_h, grid_w, half), ex[None, :, :].expand(grid_h, grid_w, half)],
        dim=-1,
    )
    return pe.reshape(grid_h * grid_w, dim).float()


def attention_scores(q, k, key_mask=None):
    """Softmax attention weights for ``(B, H, Nq, dh)`` queries and ``(B, H, Nk, dh)`` keys."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, num_visual, mode, key_mask=None, return_weights=False):
        if mode == "adapted":
            source = x[:, :num_visual]
            key_mask = None
        else:
            source = x
        q = self._split(self.q(x))
        k = self._split(self.k(source))
        v = self._split(self.v(source))
        w = attention_scores(q, k, key_mask)
        y = (w @ v).transpose(1, 2).reshape(x.shape)
        y = self.out(y)
        return (y, w) if return_weights else y


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, num_visual, mode, key_mask=None):
        x = x + self.attn(self.norm1(x), num_visual, mode, key_mask)
        return x + self.mlp(self.norm2(x))


class KeypointTransformer(nn.Module):
    def __init__(self, config=TOY_CONFIG):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(3 * c.patch_height * c.patch_width, c.dim)
        self.register_buffer("pos", sine_position_encoding(*c.grid, c.dim), persistent=False)
        self.embed_p = nn.Linear(NUM_KEYPOINTS, c.dim // 2)
        self.embed_t = nn.Linear(THICKNESS_DIM, c.dim // 2)
        self.blocks = nn.ModuleList(Block(c.dim, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = nn.LayerNorm(c.dim)
        self.head = nn.Sequential(
            nn.Linear(c.dim, c.head_hidden),
            nn.GELU(),
            nn.Linear(c.head_hidden, c.heatmap_height * c.heatmap_width),
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=1.0 / math.sqrt(m.in_features))
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def patchify(self, images):
        """``(B, 3, H, W)`` -> ``(B, N, 3 * ph * pw)`` in row-major patch order."""
        c = self.config
        b = images.shape[0]
        if images.shape[1:] != (3, c.input_height, c.input_width):
            raise ConfigError(
                f"expected images of shape (3, {c.input_height}, {c.input_width}), "
                f"got {tuple(images.shape[1:])}"
            )
        gh, gw = c.grid
        x = images.reshape(b, 3, gh, c.patch_height, gw, c.patch_width)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, -1)

    def embed_queries(self, tokens):
        """``(..., 20)`` token vectors -> ``(..., dim)`` query embeddings."""
        return torch.cat(
            [self.embed_p(tokens[..., :NUM_KEYPOINTS]), self.embed_t(tokens[..., NUM_KEYPOINTS:])],
            dim=-1,
        )

    def visual_tokens(self, images):
        return self.patch_embed(self.patchify(images))

    def forward(self, images, tokens, query_mask=None, attention=None):
        """Heatmaps ``(B, K, Hh, Wh)`` for images ``(B, 3, H, W)`` and tokens ``(B, K, 20)``.

        ``query_mask`` marks real (non-padding) queries; only used as a key mask
        in standard mode.
        """
        c = self.config
        mode = attention or c.attention
        vis = self.visual_tokens(images)
        n_vis = vis.shape[1]
        queries = self.embed_queries(tokens)
        x = torch.cat([vis, queries], dim=1)
        key_mask = None
        if mode == "standard" and query_mask is not None:
            ones = torch.ones(x.shape[0], n_vis, dtype=torch.bool, device=x.device)
            key_mask = torch.cat([ones, query_mask.bool()], dim=1)
        pos = self.pos.to(x.dtype)
        for block in self.blocks:
            x = torch.cat([x[:, :n_vis] + pos, x[:, n_vis:]], dim=1)
            x = block(x, n_vis, mode, key_mask)
        out = self.head(self.norm(x[:, n_vis:]))
        return out.view(x.shape[0], -1, c.heatmap_height, c.heatmap_width)


def image_tensor(images):
    """uint8 ``(H, W, 3)`` or ``(B, H, W, 3)`` arrays -> float ``(B, 3, H, W)`` centred on 0."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(a / 255.0 - 0.5).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def predict_heatmaps(model, image, specs, chunk=None):
    """Heatmaps ``(K, Hh, Wh)`` for one cropped input image and a list of specs."""
    model.eval()
    c = model.config
    if len(specs) == 0:
        return np.zeros((0, c.heatmap_height, c.heatmap_width), dtype=np.float32)
    dtype = next(model.parameters()).dtype
    img = image_tensor(image).to(dtype)
    tokens = torch.from_numpy(encode_batch(specs)).to(dtype)[None]
    if chunk is None:
        return model(img, tokens)[0].numpy()
    parts = [model(img, tokens[:, s : s + chunk])[0] for s in range(0, tokens.shape[1], chunk)]
    return torch.cat(parts).numpy()


def make_target(point, config):
    """Unnormalised Gaussian heatmap (peak 1) at an input-pixel point."""
    sx, sy = config.stride
    u = point[0] / sx - 0.5
    v = point[1] / sy - 0.5
    xs = np.arange(config.heatmap_width)
    ys = np.arange(config.heatmap_height)
    g = np.exp(-((xs[None, :] - u) ** 2 + (ys[:, None] - v) ** 2) / (2 * config.sigma**2))
    return g.astype(np.float32)


def make_targets(points, config):
    """Vectorised :func:`make_target` for an ``(n, 2)`` array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sx, sy = config.stride
    u = pts[:, 0] / sx - 0.5
    v = pts[:, 1] / sy - 0.5
    xs = np.arange(config.heatmap_width)
    ys = np.arange(config.heatmap_height)
    gx = np.exp(-((xs[None, :] - u[:, None]) ** 2) / (2 * config.sigma**2))
    gy = np.exp(-((ys[None, :] - v[:, None]) ** 2) / (2 * config.sigma**2))
    return (gy[:, :, None] * gx[:, None, :]).astype(np.float32)


def _log_parabola_offset(left, centre, right):
    if left <= 0 or centre <= 0 or right <= 0:
        return 0.0
    a, b, c = math.log(left), math.log(centre), math.log(right)
    den = a - 2 * b + c
    if den >= 0:
        return 0.0
    return float(min(max(0.5 * (a - c) / den, -0.5), 0.5))


def decode_heatmap(hm):
    """Peak location ``(u, v)`` in heatmap cells (integer = cell centre) and score.

    Argmax plus a per-axis parabola fit to the log activations; the offset is
    zero when a neighbour is missing or not positive. A flat heatmap decodes to
    the grid centre.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if hm.size == 0:
        raise ValueError("empty heatmap")
    h, w = hm.shape
    peak = float(hm.max())
    if peak == float(hm.min()):
        return (w - 1) / 2.0, (h - 1) / 2.0, min(max(peak, 0.0), 1.0)
    row, col = np.unravel_index(int(np.argmax(hm)), hm.shape)
    du = dv = 0.0
    if 0 < col < w - 1:
        du = _log_parabola_offset(hm[row, col - 1], hm[row, col], hm[row, col + 1])
    if 0 < row < h - 1:
        dv = _log_parabola_offset(hm[row - 1, col], hm[row, col], hm[row + 1, col])
    return col + du, row + dv, min(max(peak, 0.0), 1.0)


def heatmap_to_input(u, v, config):
    sx, sy = config.stride
    return (u + 0.5) * sx, (v + 0.5) * sy


def heatmap_to_keypoint(hm, crop, config):
    u, v, score = decode_heatmap(hm)
    x, y = crop.inverse(heatmap_to_input(u, v, config))
    return Keypoint(float(x), float(y), True, score)


def decode_batch(heatmaps, config):
    """Decode ``(K, Hh, Wh)`` heatmaps to input-pixel points ``(K, 2)`` and scores ``(K,)``."""
    pts = np.zeros((len(heatmaps), 2))
    scores = np.zeros(len(heatmaps))
    for n, hm in enumerate(heatmaps):
        u, v, s = decode_heatmap(hm)
        pts[n] = heatmap_to_input(u, v, config)
        scores[n] = s
    return pts, scores


def ema_update(ema, current, rate=0.99):
    """``ema <- rate * ema + (1 - rate) * current`` elementwise.

    Accepts two modules (updated in place, floating tensors only) or two
    mappings of arrays/tensors (a new mapping is returned).
    """
    if isinstance(ema, nn.Module):
        with torch.no_grad():
            cur = current.state_dict()
            for name, t in ema.state_dict().items():
                if t.shape != cur[name].shape:
                    raise ValueError(f"shape mismatch for {name}")
                if t.is_floating_point():
                    t.mul_(rate).add_(cur[name], alpha=1.0 - rate)
                else:
                    t.copy_(cur[name])
        return ema
    if set(ema) != set(current):
        raise ValueError("parameter names differ")
    out = {}
    for name, value in ema.items():
        if np.shape(value) != np.shape(current[name]):
            raise ValueError(f"shape mismatch for {name}")
        out[name] = rate * value + (1.0 - rate) * current[name]
    return out


CHECKPOINT_MAGIC = b"ARBKPCK1"


def save_checkpoint(path, model, meta=None):
    """Flat container: magic, uint64 header length, JSON header, raw tensor bytes.

    The header holds the model config, free-form ``meta`` and, per tensor, its
    name, dtype, shape and byte offset into the data section (little endian,
    C order).
    """
    state = model.state_dict() if isinstance(model, nn.Module) else model
    config = model.config if isinstance(model, nn.Module) else (meta or {}).get("config")
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "config": config.to_dict() if isinstance(config, ModelConfig) else config,
        "meta": {k: v for k, v in (meta or {}).items() if k != "config"},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def read_checkpoint(path):
    """Returns ``(ModelConfig, {name: tensor}, meta)``."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        data = f.read()
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return ModelConfig.from_dict(header["config"]), state, header["meta"]


def load_model(path, attention=None):
    config, state, meta = read_checkpoint(path)
    if attention is not None:
        config = replace(config, attention=attention)
    model = KeypointTransformer(config)
    model.load_state_dict(state)
    model.eval()
    return model, meta


def _layer_attention(model, x, layer, mode, return_weights):
    block = model.blocks[layer]
    out = block.attn(block.norm1(x), model.config.num_visual, mode, return_weights=return_weights)
    if return_weights:
        return x + out[0], out[1]
    return x + out


def attention_standard(model, x, layer, return_weights=False):
    """Residual attention step of ``layer`` over all tokens of the state ``x``."""
    return _layer_attention(model, x, layer, "standard", return_weights)


def attention_adapted(model, x, layer, return_weights=False):
    """Residual attention step of ``layer`` with visual-only keys and values."""
    return _layer_attention(model, x, layer, "adapted", return_weights)
