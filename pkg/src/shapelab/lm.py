"""Decoder-only transformer with RoPE and shared input/output embedding.

The forward pass takes pre-embedded inputs (image embeddings are spliced
in upstream), an explicit boolean attention mask, and a position vector,
so the same code path serves prefix-LM training, the ablated masking
variants, and incremental decoding against a KV cache. Positions may be
fractional to support RoPE interpolation of image tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamTree, Tensor, _make

GAUSSIAN = "gaussian"
AVG_EMB = "avg_emb"


@dataclass(frozen=True)
class LMConfig:
    d_lm: int = 128
    depth: int = 4
    heads: int = 4
    vocab: int = 1413
    max_len: int = 128
    dropout_rate: float = 0.0
    tie_embeddings: bool = True
    rope_base: float = 10000.0
    rope_interpolate_images: bool = False

    def __post_init__(self):
        if self.d_lm % self.heads:
            raise ValueError("d_lm must be divisible by heads")
        if (self.d_lm // self.heads) % 2:
            raise ValueError("head dim must be even for RoPE pairing")

    @property
    def head_dim(self):
        return self.d_lm // self.heads

    def to_dict(self):
        return dict(d_lm=self.d_lm, depth=self.depth, heads=self.heads,
                    vocab=self.vocab, max_len=self.max_len,
                    dropout_rate=self.dropout_rate,
                    tie_embeddings=self.tie_embeddings,
                    rope_base=self.rope_base,
                    rope_interpolate_images=self.rope_interpolate_images)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class InitStrategy:
    kind: str = GAUSSIAN
    sigma: float = 0.02
    noise: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def _rope_tables(positions, head_dim, base):
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def _apply_rope(x, cos, sin):
    """Rotate half-split pairs of the last axis of [B, H, T, dh]."""
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin,
                                -g1 * sin + g2 * cos], axis=-1),)

    return _make(out, (x,), bwd)


def rope_positions(layout, interpolate=False, native_n_img=None):
    """Position indices for a layout; fractional image positions when
    interpolating a grid larger than the native one."""
    n = layout.total_len
    pos = np.arange(n, dtype=np.float32)
    if interpolate and native_n_img and layout.n_img > native_n_img:
        pos = pos.copy()
        pos[:layout.n_img] = np.arange(layout.n_img) * (
            native_n_img / layout.n_img)
        pos[layout.n_img:] = native_n_img + np.arange(n - layout.n_img)
    return pos


def mask_to_bias(mask, dtype=np.float32):
    return np.where(mask, 0.0, -1e9).astype(dtype)


class DecoderLM:
    def __init__(self, cfg, rng=None, params=None, prefix="lm"):
        self.cfg = cfg
        self.prefix = prefix
        if params is not None:
            self.params = params
            return
        rng = rng or np.random.default_rng(0)
        p = ParamTree()
        d = cfg.d_lm
        p[f"{prefix}.embed"] = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.vocab, d)).astype(np.float32),
            requires_grad=True)
        if not cfg.tie_embeddings:
            p[f"{prefix}.head.w"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(d),
                           size=(d, cfg.vocab)).astype(np.float32),
                requires_grad=True)
        for i in range(cfg.depth):
            blk = f"{prefix}.block{i}"
            for name in ("norm1", "norm2"):
                p[f"{blk}.{name}.g"] = Tensor(np.ones(d, dtype=np.float32),
                                              requires_grad=True)
                p[f"{blk}.{name}.b"] = Tensor(np.zeros(d, dtype=np.float32),
                                              requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{blk}.attn.{name}.w"] = Tensor(
                    rng.normal(0.0, 1.0 / math.sqrt(d),
                               size=(d, d)).astype(np.float32),
                    requires_grad=True)
                p[f"{blk}.attn.{name}.b"] = Tensor(
                    np.zeros(d, dtype=np.float32), requires_grad=True)
            _mlp_dims = ((d, 4 * d), (4 * d, d))
            for name, (fi, fo) in zip(("fc1", "fc2"), _mlp_dims):
                p[f"{blk}.mlp.{name}.w"] = Tensor(
                    rng.normal(0.0, 1.0 / math.sqrt(fi),
                               size=(fi, fo)).astype(np.float32),
                    requires_grad=True)
                p[f"{blk}.mlp.{name}.b"] = Tensor(
                    np.zeros(fo, dtype=np.float32), requires_grad=True)
        p[f"{prefix}.norm_out.g"] = Tensor(np.ones(d, dtype=np.float32),
                                           requires_grad=True)
        p[f"{prefix}.norm_out.b"] = Tensor(np.zeros(d, dtype=np.float32),
                                           requires_grad=True)
        self.params = p

    # -- embedding table utilities -----------------------------------------

    @property
    def embed_table(self):
        return self.params[f"{self.prefix}.embed"]

    def embed(self, ids):
        return T.embedding(self.embed_table, np.asarray(ids))

    def init_new_tokens(self, new_ids, strategy, rng):
        """Re-initialize embedding rows for newly added token ids."""
        table = self.embed_table.data
        new_ids = np.asarray(new_ids)
        if new_ids.size and (new_ids.min() < 0 or new_ids.max() >= table.shape[0]):
            raise ValueError("new token id out of range")
        d = table.shape[1]
        if strategy.kind == GAUSSIAN:
            table[new_ids] = rng.normal(
                0.0, strategy.sigma, size=(new_ids.size, d))
        elif strategy.kind == AVG_EMB:
            old = np.setdiff1d(np.arange(table.shape[0]), new_ids)
            if old.size == 0:
                raise ValueError("AVG_EMB needs at least one pretrained row")
            mean = table[old].mean(axis=0)
            table[new_ids] = mean + rng.normal(
                0.0, strategy.noise, size=(new_ids.size, d))
        else:
            raise ValueError(f"unknown init strategy {strategy.kind!r}")

    # -- forward -------------------------------------------------------------

    def _linear(self, path, x):
        p = self.params
        return T.matmul(x, p[path + ".w"]) + p[path + ".b"]

    def _norm(self, path, x):
        p = self.params
        return T.layer_norm(x, p[path + ".g"], p[path + ".b"])

    def forward(self, embedded, mask, positions, cache=None, training=False,
                rng=None):
        """[B?, L, d] -> [B?, L, vocab] logits.

        ``mask`` is boolean [L, K] (K = L without a cache, cached length + L
        with one). With ``cache``, new keys/values are appended per layer and
        queries attend to everything cached plus the new positions.
        """
        cfg = self.cfg
        single = embedded.ndim == 2
        x = embedded if isinstance(embedded, Tensor) else Tensor(embedded)
        if single:
            x = T.reshape(x, (1,) + x.shape)
        b, L, d = x.shape
        if mask.ndim not in (2, 3) or mask.shape[-2] != L:
            raise ValueError(f"mask shape {mask.shape} does not match length {L}")
        n_ctx = mask.shape[-1]
        if cache is None and n_ctx != L:
            raise ValueError("square mask required without a cache")
        bias = mask_to_bias(mask)
        if bias.ndim == 3:
            bias = bias[:, None, :, :]   # broadcast over heads
        h_dim = cfg.head_dim
        cos, sin = _rope_tables(positions, h_dim, cfg.rope_base)
        drop = cfg.dropout_rate if training else 0.0
        for i in range(cfg.depth):
            blk = f"{self.prefix}.block{i}"
            xin = self._norm(blk + ".norm1", x)
            q = self._linear(blk + ".attn.wq", xin)
            k = self._linear(blk + ".attn.wk", xin)
            v = self._linear(blk + ".attn.wv", xin)

            def split(t):
                return T.transpose(T.reshape(t, (b, L, cfg.heads, h_dim)),
                                   (0, 2, 1, 3))

            q, k, v = split(q), split(k), split(v)
            q = _apply_rope(q, cos, sin)
            k = _apply_rope(k, cos, sin)
            if cache is not None:
                k_full, v_full = cache.append(i, k.data, v.data)
                k = Tensor(k_full)
                v = Tensor(v_full)
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                             1.0 / math.sqrt(h_dim))
            scores = T.add_bias_mask(scores, bias)
            attn = T.softmax(scores, axis=-1)
            out = T.matmul(attn, v)
            out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, L, d))
            out = self._linear(blk + ".attn.wo", out)
            if drop > 0:
                out = T.dropout(out, drop, rng, training=True)
            x = x + out
            h = self._linear(blk + ".mlp.fc1", self._norm(blk + ".norm2", x))
            h = self._linear(blk + ".mlp.fc2", T.gelu(h))
            if drop > 0:
                h = T.dropout(h, drop, rng, training=True)
            x = x + h
        x = self._norm(f"{self.prefix}.norm_out", x)
        if cfg.tie_embeddings:
            logits = T.matmul(x, T.transpose(self.embed_table))
        else:
            logits = T.matmul(x, self.params[f"{self.prefix}.head.w"])
        return T.reshape(logits, logits.shape[1:]) if single else logits
