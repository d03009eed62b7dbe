"""Structured-output codecs: location tokens for boxes, VQ codes for masks.

Boxes use floor-with-clamp binning into 1024 uniform bins (ymin, xmin,
ymax, xmax order) and decode to bin centers, which makes decoding exactly
idempotent on centers and bounds the roundtrip error by half a bin.

Masks are cropped to their box, resized to a canonical 64x64 crop, and
quantized by a small VQ autoencoder into a 4x4 grid of codebook indices:
exactly 16 segmentation tokens per instance from a codebook of 128.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamTree, Tensor, _make
from .vocab import N_LOC, N_SEG, VocabSpec

CROP = 64
CODE_GRID = 4
CODES_PER_MASK = CODE_GRID * CODE_GRID


@dataclass(frozen=True)
class Box:
    ymin: float
    xmin: float
    ymax: float
    xmax: float

    def __post_init__(self):
        for v in (self.ymin, self.xmin, self.ymax, self.xmax):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box coordinate {v} outside [0, 1]")
        if self.ymin > self.ymax or self.xmin > self.xmax:
            raise ValueError("box min exceeds max")

    def pixel_rect(self, res):
        """Integer (y0, y1, x0, x1) crop rectangle on a res-px canvas."""
        y0 = int(np.floor(self.ymin * res))
        x0 = int(np.floor(self.xmin * res))
        y1 = min(int(np.ceil(self.ymax * res)), res)
        x1 = min(int(np.ceil(self.xmax * res)), res)
        return y0, y1, x0, x1


def box_encode(box, vocab=None):
    """Box -> 4 location token ids in ymin, xmin, ymax, xmax order."""
    vocab = vocab or VocabSpec()
    return [
        vocab.loc_id(min(int(np.floor(v * N_LOC)), N_LOC - 1))
        for v in (box.ymin, box.xmin, box.ymax, box.xmax)
    ]


def box_decode(ids, vocab=None):
    """4 location ids -> Box at bin centers."""
    vocab = vocab or VocabSpec()
    if len(ids) != 4:
        raise ValueError("box decoding needs exactly 4 location ids")
    vals = [(vocab.loc_bin(t) + 0.5) / N_LOC for t in ids]
    return Box(*vals)


def resize_nearest(arr, out_h, out_w):
    in_h, in_w = arr.shape[:2]
    yi = np.minimum((np.arange(out_h) + 0.5) * in_h / out_h, in_h - 1).astype(int)
    xi = np.minimum((np.arange(out_w) + 0.5) * in_w / out_w, in_w - 1).astype(int)
    return arr[yi][:, xi]


# -- VQ autoencoder ----------------------------------------------------------

def _space_to_depth(x, k):
    b, h, w, c = x.shape
    x = T.reshape(x, (b, h // k, k, w // k, k, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h // k, w // k, k * k * c))


def _depth_to_space(x, k, c_out):
    b, h, w, c = x.shape
    x = T.reshape(x, (b, h, w, k, k, c_out))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h * k, w * k, c_out))


def _bce_logits(logits, target):
    """Mean sigmoid cross-entropy with logits, numerically stable."""
    x = logits.data
    t = np.asarray(target, dtype=x.dtype)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - t) / n,)

    return _make(np.asarray(loss.mean()), (logits,), bwd)


@dataclass(frozen=True)
class VqConfig:
    d_code: int = 16
    n_codes: int = N_SEG
    hidden: int = 64
    beta: float = 0.25

    def to_dict(self):
        return dict(d_code=self.d_code, n_codes=self.n_codes,
                    hidden=self.hidden, beta=self.beta)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class VqvaeModel:
    """Binary 64x64 crop <-> 4x4 grid of codebook indices."""

    def __init__(self, cfg=None, rng=None, params=None, prefix="vqvae"):
        self.cfg = cfg or VqConfig()
        self.prefix = prefix
        if params is not None:
            self.params = params
            return
        rng = rng or np.random.default_rng(0)
        p = ParamTree()
        h = self.cfg.hidden

        def lin(path, fi, fo):
            p[f"{prefix}.{path}.w"] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(fi),
                           size=(fi, fo)).astype(np.float32),
                requires_grad=True)
            p[f"{prefix}.{path}.b"] = Tensor(np.zeros(fo, dtype=np.float32),
                                             requires_grad=True)

        lin("enc1", 16, h)            # 64->16 grid, 4x4x1 patches
        lin("enc2", 16 * h, 2 * h)    # 16->4 grid
        lin("enc3", 2 * h, self.cfg.d_code)
        lin("dec1", self.cfg.d_code, 2 * h)
        lin("dec2", 2 * h, 16 * h)    # 4->16 grid via depth-to-space
        lin("dec3", h, 16)            # 16->64 grid
        p[f"{prefix}.codebook"] = Tensor(
            rng.normal(0.0, 1.0, size=(self.cfg.n_codes,
                                       self.cfg.d_code)).astype(np.float32),
            requires_grad=True)
        self.params = p

    @property
    def codebook(self):
        return self.params[f"{self.prefix}.codebook"]

    def _lin(self, path, x):
        p = self.params
        return T.matmul(x, p[f"{self.prefix}.{path}.w"]) + \
            p[f"{self.prefix}.{path}.b"]

    def encode_latent(self, masks):
        """[B, 64, 64] binary -> [B, 4, 4, d_code] continuous latents."""
        x = Tensor(np.asarray(masks, dtype=np.float32)[..., None])
        x = _space_to_depth(x, 4)
        x = T.gelu(self._lin("enc1", x))
        x = _space_to_depth(x, 4)
        x = T.gelu(self._lin("enc2", x))
        return self._lin("enc3", x)

    def quantize(self, z):
        """Nearest codebook entry per cell; returns (indices, quantized)."""
        flat = z.data.reshape(-1, self.cfg.d_code)
        cb = self.codebook.data
        d2 = ((flat[:, None, :] - cb[None, :, :]) ** 2).sum(axis=-1)
        idx = d2.argmin(axis=1).reshape(z.shape[:-1])
        zq = T.embedding(self.codebook, idx)
        return idx, zq

    def decode_logits(self, zq):
        """[B, 4, 4, d_code] -> [B, 64, 64] reconstruction logits."""
        h = self.cfg.hidden
        x = T.gelu(self._lin("dec1", zq))
        x = self._lin("dec2", x)
        x = T.gelu(_depth_to_space(x, 4, h))
        x = self._lin("dec3", x)
        x = _depth_to_space(x, 4, 1)
        return T.reshape(x, x.shape[:-1])

    def codes_for(self, masks):
        """[B, 64, 64] -> [B, 16] codebook indices, row-major."""
        z = self.encode_latent(masks)
        idx, _ = self.quantize(z)
        return idx.reshape(idx.shape[0], CODES_PER_MASK)

    def reconstruct(self, codes):
        """[B, 16] indices -> [B, 64, 64] boolean masks."""
        idx = np.asarray(codes).reshape(-1, CODE_GRID, CODE_GRID)
        zq = T.embedding(self.codebook, idx)
        with T.no_grad():
            logits = self.decode_logits(zq)
        return logits.data > 0.0

    def train_step_losses(self, masks):
        """Forward pass returning (total, recon, codebook, commit) losses.

        Straight-through estimator: the decoder input is the quantized
        latent but its gradient flows to the encoder; the codebook learns
        only from its own loss term.
        """
        target = np.asarray(masks, dtype=np.float32)
        z = self.encode_latent(target)
        idx, zq = self.quantize(z)
        z_st = z + T.stop_gradient(zq + T.scale(z, -1.0))
        logits = self.decode_logits(z_st)
        recon = _bce_logits(logits, target)
        diff_cb = zq + T.stop_gradient(T.scale(z, -1.0))
        codebook_loss = (diff_cb * diff_cb).mean()
        diff_commit = z + T.stop_gradient(T.scale(zq, -1.0))
        commit_loss = (diff_commit * diff_commit).mean()
        total = recon + codebook_loss + T.scale(commit_loss, self.cfg.beta)
        return total, recon, codebook_loss, commit_loss, idx


def mask_encode(mask, box, vq, vocab=None):
    """Binary res x res mask + its box -> 16 segmentation token ids."""
    vocab = vocab or VocabSpec()
    mask = np.asarray(mask, dtype=bool)
    res = mask.shape[0]
    y0, y1, x0, x1 = box.pixel_rect(res)
    if y1 <= y0 or x1 <= x0:
        raise ValueError("degenerate box: zero-area crop")
    crop = resize_nearest(mask[y0:y1, x0:x1].astype(np.float32), CROP, CROP)
    with T.no_grad():
        codes = vq.codes_for(crop[None])[0]
    return [vocab.seg_id(int(c)) for c in codes]


def mask_decode(ids, box, res, vq, vocab=None):
    """16 segmentation ids + box -> boolean res x res canvas mask."""
    vocab = vocab or VocabSpec()
    if len(ids) != CODES_PER_MASK:
        raise ValueError(
            f"mask decoding needs exactly {CODES_PER_MASK} segmentation ids")
    codes = [vocab.seg_code(t) for t in ids]
    crop = vq.reconstruct(np.asarray(codes)[None])[0]
    canvas = np.zeros((res, res), dtype=bool)
    y0, y1, x0, x1 = box.pixel_rect(res)
    if y1 > y0 and x1 > x0:
        canvas[y0:y1, x0:x1] = resize_nearest(
            crop.astype(np.float32), y1 - y0, x1 - x0) > 0.5
    return canvas


# -- suffix string formats ---------------------------------------------------

_LOC_RUN = re.compile(r"((?:<loc\d{4}>){4})\s*([^;]*?)\s*(?:;|$)")
_LOC_TOK = re.compile(r"<loc(\d{4})>")
_SEG_TOK = re.compile(r"<seg(\d{3})>")

INSTANCE_SEP = " ; "


def _loc_string(box, vocab):
    bins = [vocab.loc_bin(t) for t in box_encode(box, vocab)]
    return "".join(f"<loc{b:04d}>" for b in bins)


def format_detection(instances, vocab=None):
    """[(Box, label)] -> "<loc..>x4 label ; <loc..>x4 label ..." """
    vocab = vocab or VocabSpec()
    parts = []
    for box, label in instances:
        if "\n" in label:
            raise ValueError("labels must be newline-free")
        parts.append(f"{_loc_string(box, vocab)} {label}")
    return INSTANCE_SEP.join(parts)


def parse_detection(text, vocab=None):
    """Inverse of format_detection; tolerant of trailing separators."""
    vocab = vocab or VocabSpec()
    text = text.strip()
    if not text:
        return []
    instances = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        locs = _LOC_TOK.findall(chunk)
        if len(locs) != 4:
            raise ValueError(
                f"malformed detection instance (needs 4 loc tokens): {chunk!r}")
        box = box_decode([vocab.loc_id(int(v)) for v in locs], vocab)
        label = _LOC_TOK.sub("", chunk).strip()
        instances.append((box, label))
    return instances


def format_segmentation(instances, vocab=None):
    """[(Box, seg_ids, label-or-None)] -> per-instance 4 loc + 16 seg tokens."""
    vocab = vocab or VocabSpec()
    parts = []
    for box, seg_ids, label in instances:
        segs = "".join(f"<seg{vocab.seg_code(t):03d}>" for t in seg_ids)
        piece = _loc_string(box, vocab) + segs
        if label:
            piece += f" {label}"
        parts.append(piece)
    return INSTANCE_SEP.join(parts)


def parse_segmentation(text, vocab=None):
    """Inverse of format_segmentation: [(Box, seg_ids, label-or-None)]."""
    vocab = vocab or VocabSpec()
    text = text.strip()
    if not text:
        return []
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        locs = _LOC_TOK.findall(chunk)
        segs = _SEG_TOK.findall(chunk)
        if len(locs) != 4 or len(segs) != CODES_PER_MASK:
            raise ValueError(
                f"malformed segmentation instance: {chunk!r}")
        box = box_decode([vocab.loc_id(int(v)) for v in locs], vocab)
        seg_ids = [vocab.seg_id(int(v)) for v in segs]
        label = _SEG_TOK.sub("", _LOC_TOK.sub("", chunk)).strip() or None
        out.append((box, seg_ids, label))
    return out
