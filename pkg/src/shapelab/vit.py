"""Tiny vision transformer, raw-patch pathway, and quadrant windowing.

Desk-scale resolutions are {32, 64, 128} with patch size 8, preserving the
1:4:16 image-token ratio across the three supported resolutions. Positional
embeddings are learned absolute; resolution upcycling reuses them via
bilinear interpolation to the new grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import ParamTree, Tensor

SUPPORTED_RES = (32, 64, 128)

VIT = "vit"
RAW_PATCH = "raw_patch"


@dataclass(frozen=True)
class EncoderConfig:
    res: int = 32
    patch: int = 8
    d_vit: int = 64
    depth: int = 4
    heads: int = 4
    mode: str = VIT
    d_out: int = 128          # LM width; used by the raw-patch pathway
    window_ids: bool = False

    def __post_init__(self):
        if self.res % self.patch:
            raise ValueError("resolution must be divisible by patch size")

    @property
    def grid(self):
        return self.res // self.patch

    @property
    def n_img(self):
        return self.grid * self.grid

    def to_dict(self):
        return dict(res=self.res, patch=self.patch, d_vit=self.d_vit,
                    depth=self.depth, heads=self.heads, mode=self.mode,
                    d_out=self.d_out, window_ids=self.window_ids)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def patchify(img, patch):
    """[..., H, W, 3] -> [..., (H/P)*(W/P), 3*P*P], row-major patch order.

    Each patch is flattened channel-last: (py, px, channel).
    """
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError("image side not divisible by patch size")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)      # [..., gh, gw, patch, patch, c]
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches, patch, res):
    """Inverse of ``patchify`` for a square image."""
    *lead, n, d = patches.shape
    g = res // patch
    x = patches.reshape(*lead, g, g, patch, patch, 3)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, res, res, 3)


def _init_linear(params, path, fan_in, fan_out, rng, zero=False):
    std = 0.0 if zero else 1.0 / math.sqrt(fan_in)
    params[path + ".w"] = Tensor(
        rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32)
        if not zero else np.zeros((fan_in, fan_out), dtype=np.float32),
        requires_grad=True)
    params[path + ".b"] = Tensor(np.zeros(fan_out, dtype=np.float32),
                                 requires_grad=True)


def _linear(params, path, x):
    return T.matmul(x, params[path + ".w"]) + params[path + ".b"]


def _init_norm(params, path, dim):
    params[path + ".g"] = Tensor(np.ones(dim, dtype=np.float32),
                                 requires_grad=True)
    params[path + ".b"] = Tensor(np.zeros(dim, dtype=np.float32),
                                 requires_grad=True)


def _norm(params, path, x):
    return T.layer_norm(x, params[path + ".g"], params[path + ".b"])


def _attention(params, path, x, heads):
    """Bidirectional multi-head self-attention over [B, N, d]."""
    b, n, d = x.shape
    dh = d // heads
    q = _linear(params, path + ".wq", x)
    k = _linear(params, path + ".wk", x)
    v = _linear(params, path + ".wv", x)

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                     1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return _linear(params, path + ".wo", out)


class VitEncoder:
    """Patch embedding + pre-norm transformer blocks (or a single raw-patch map)."""

    def __init__(self, cfg, rng=None, params=None, prefix="vit"):
        self.cfg = cfg
        self.prefix = prefix
        if params is not None:
            self.params = params
            return
        rng = rng or np.random.default_rng(0)
        p = ParamTree()
        d_patch = 3 * cfg.patch * cfg.patch
        if cfg.mode == RAW_PATCH:
            _init_linear(p, f"{prefix}.raw_embed", d_patch, cfg.d_out, rng)
            self.params = p
            return
        d = cfg.d_vit
        _init_linear(p, f"{prefix}.patch_embed", d_patch, d, rng)
        p[f"{prefix}.pos_embed"] = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.n_img, d)).astype(np.float32),
            requires_grad=True)
        if cfg.window_ids:
            p[f"{prefix}.window_embed"] = Tensor(
                rng.normal(0.0, 0.02, size=(4, d)).astype(np.float32),
                requires_grad=True)
        for i in range(cfg.depth):
            blk = f"{prefix}.block{i}"
            _init_norm(p, blk + ".norm1", d)
            for name in ("wq", "wk", "wv", "wo"):
                _init_linear(p, f"{blk}.attn.{name}", d, d, rng)
            _init_norm(p, blk + ".norm2", d)
            _init_linear(p, blk + ".mlp.fc1", d, 4 * d, rng)
            _init_linear(p, blk + ".mlp.fc2", 4 * d, d, rng)
        _init_norm(p, f"{prefix}.norm_out", d)
        self.params = p

    def encode(self, img):
        """[B?, res, res, 3] -> [B?, n_img, d_vit]."""
        if self.cfg.mode != VIT:
            raise ValueError("encode requires VIT mode")
        single = img.ndim == 3
        arr = np.asarray(img, dtype=np.float32)
        if single:
            arr = arr[None]
        if arr.shape[1] != self.cfg.res:
            raise ValueError(
                f"expected {self.cfg.res}px input, got {arr.shape[1]}")
        p, pre = self.params, self.prefix
        x = Tensor(patchify(arr, self.cfg.patch))
        x = _linear(p, f"{pre}.patch_embed", x) + p[f"{pre}.pos_embed"]
        for i in range(self.cfg.depth):
            blk = f"{pre}.block{i}"
            x = x + _attention(p, blk + ".attn",
                               _norm(p, blk + ".norm1", x), self.cfg.heads)
            h = _linear(p, blk + ".mlp.fc1", _norm(p, blk + ".norm2", x))
            x = x + _linear(p, blk + ".mlp.fc2", T.gelu(h))
        x = _norm(p, f"{pre}.norm_out", x)
        return T.reshape(x, x.shape[1:]) if single else x

    def raw_patch_embed(self, img):
        """Linear projection of raw patches straight to LM width."""
        if self.cfg.mode != RAW_PATCH:
            raise ValueError("raw_patch_embed requires RAW_PATCH mode")
        single = img.ndim == 3
        arr = np.asarray(img, dtype=np.float32)
        if single:
            arr = arr[None]
        x = Tensor(patchify(arr, self.cfg.patch))
        out = _linear(self.params, f"{self.prefix}.raw_embed", x)
        return T.reshape(out, out.shape[1:]) if single else out

    def window_encode(self, img, window_ids=False):
        """Encode a 2x-resolution image as four native-resolution quadrants.

        Quadrants are encoded independently and concatenated in row-major
        window order; when ``window_ids`` is on, a learned per-quadrant
        embedding is added to each block.
        """
        single = img.ndim == 3
        arr = np.asarray(img, dtype=np.float32)
        if single:
            arr = arr[None]
        r = self.cfg.res
        if arr.shape[1] != 2 * r or arr.shape[2] != 2 * r:
            raise ValueError("window_encode expects a 2x-resolution image")
        if window_ids and f"{self.prefix}.window_embed" not in self.params:
            raise ValueError("encoder built without window-id embeddings")
        blocks = []
        for wi, (ys, xs) in enumerate(((0, 0), (0, r), (r, 0), (r, r))):
            quad = self.encode(arr[:, ys:ys + r, xs:xs + r])
            if window_ids:
                wemb = T.getitem(self.params[f"{self.prefix}.window_embed"],
                                 np.array([wi]))
                quad = quad + wemb
            blocks.append(quad)
        out = T.concat(blocks, axis=1)
        return T.reshape(out, out.shape[1:]) if single else out

    def upcycle(self, new_res, rng=None):
        """Return a copy configured for ``new_res`` with interpolated pos embeddings."""
        new_cfg = replace(self.cfg, res=new_res)
        p = ParamTree()
        for k, t in self.params.items():
            p[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        key = f"{self.prefix}.pos_embed"
        if key in p:
            p[key] = Tensor(
                interpolate_pos_embed(p[key].data, self.cfg.grid,
                                      new_cfg.grid),
                requires_grad=True)
        return VitEncoder(new_cfg, params=p, prefix=self.prefix)


def interpolate_pos_embed(pos, old_grid, new_grid):
    """Bilinear interpolation of a [old_grid^2, d] table to [new_grid^2, d]."""
    d = pos.shape[1]
    grid = pos.reshape(old_grid, old_grid, d)
    # sample new grid centers in the old grid's coordinate frame
    coords = (np.arange(new_grid) + 0.5) * old_grid / new_grid - 0.5
    coords = np.clip(coords, 0, old_grid - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, old_grid - 1)
    f = coords - i0
    rows = grid[i0] * (1 - f[:, None, None]) + grid[i1] * f[:, None, None]
    out = (rows[:, i0] * (1 - f[None, :, None])
           + rows[:, i1] * f[None, :, None])
    return out.reshape(new_grid * new_grid, d).astype(np.float32)
